#pragma once

// FPACK: little-endian container for token-structured feature matrices.
//
//   offset  size           field
//   0       8              magic "FLORAFPK"
//   8       4              version (u32, = 1)
//   12      4              kind (u32, 0 skeleton, 1 semantic)
//   16      4              n_items (u32)
//   20      4              M, tokens per item (u32)
//   24      4              d, feature width (u32)
//   28      4*n_items      labels (u32)
//   ...     4*n_items*M*d  features, IEEE-754 binary32, row-major [item][token][dim]

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flora/error.hpp"
#include "flora/tensor.hpp"

namespace flora {

enum class PackKind : std::uint32_t { kSkeleton = 0, kSemantic = 1 };

inline const char* to_string(PackKind k) { return k == PackKind::kSkeleton ? "skeleton" : "semantic"; }

struct FeaturePack {
  PackKind kind = PackKind::kSkeleton;
  std::uint32_t n_items = 0;
  std::uint32_t tokens = 1;
  std::uint32_t dim = 0;
  std::vector<float> features;  // n_items * tokens * dim
  std::vector<std::uint32_t> labels;
  std::vector<std::string> class_names;  // in-memory metadata only, not serialized

  std::size_t item_size() const { return static_cast<std::size_t>(tokens) * dim; }

  std::span<const float> item(std::size_t i) const {
    return std::span<const float>(features).subspan(i * item_size(), item_size());
  }

  /// Item i as a [tokens x dim] double tensor.
  Tensor item_tensor(std::size_t i) const {
    const auto s = item(i);
    return Tensor(Shape{tokens, dim}, std::vector<double>(s.begin(), s.end()));
  }

  /// Bit-level equality of every serialized field.
  friend bool operator==(const FeaturePack& a, const FeaturePack& b) {
    return a.kind == b.kind && a.n_items == b.n_items && a.tokens == b.tokens && a.dim == b.dim &&
           a.labels == b.labels && a.features.size() == b.features.size() &&
           std::memcmp(a.features.data(), b.features.data(), a.features.size() * sizeof(float)) == 0;
  }
};

/// Distinct failure classes of FPACK decoding and validation.
enum class FpackErrc {
  kBadMagic,
  kVersionMismatch,
  kBadKind,
  kTruncated,
  kTrailingBytes,
  kNonFinite,
  kBadLabels,
  kInconsistent,
  kIo,
};

inline const char* to_string(FpackErrc e) {
  switch (e) {
    case FpackErrc::kBadMagic: return "bad magic";
    case FpackErrc::kVersionMismatch: return "version mismatch";
    case FpackErrc::kBadKind: return "bad kind";
    case FpackErrc::kTruncated: return "truncated payload";
    case FpackErrc::kTrailingBytes: return "trailing bytes";
    case FpackErrc::kNonFinite: return "non-finite value in payload";
    case FpackErrc::kBadLabels: return "bad labels";
    case FpackErrc::kInconsistent: return "inconsistent pack";
    case FpackErrc::kIo: return "i/o error";
  }
  return "unknown";
}

class FpackError : public DataError {
 public:
  FpackError(FpackErrc code, const std::string& detail)
      : DataError(std::string("fpack: ") + to_string(code) + (detail.empty() ? "" : ": " + detail)), code_(code) {}
  FpackErrc code() const { return code_; }

 private:
  FpackErrc code_;
};

inline constexpr std::string_view kFpackMagic = "FLORAFPK";
inline constexpr std::uint32_t kFpackVersion = 1;
inline constexpr std::size_t kFpackHeaderBytes = 28;

/// Checks the in-memory invariants. `n_classes` (when nonzero) bounds labels.
inline void validate(const FeaturePack& p, std::uint32_t n_classes = 0) {
  if (p.kind != PackKind::kSkeleton && p.kind != PackKind::kSemantic) {
    throw FpackError(FpackErrc::kBadKind, std::to_string(static_cast<std::uint32_t>(p.kind)));
  }
  if (p.features.size() != static_cast<std::size_t>(p.n_items) * p.item_size()) {
    throw FpackError(FpackErrc::kInconsistent, "feature count does not match n_items*M*d");
  }
  if (p.labels.size() != p.n_items) throw FpackError(FpackErrc::kInconsistent, "label count != n_items");
  for (float f : p.features) {
    if (!std::isfinite(f)) throw FpackError(FpackErrc::kNonFinite, "");
  }
  if (p.kind == PackKind::kSemantic) {
    for (std::uint32_t i = 0; i < p.n_items; ++i) {
      if (p.labels[i] != i) throw FpackError(FpackErrc::kBadLabels, "semantic pack labels must be 0..n-1");
    }
  }
  if (n_classes != 0) {
    for (auto l : p.labels) {
      if (l >= n_classes) throw FpackError(FpackErrc::kBadLabels, "label " + std::to_string(l) + " out of range");
    }
  }
}

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace detail

inline std::vector<unsigned char> encode_fpack(const FeaturePack& p) {
  validate(p);
  std::vector<unsigned char> out;
  out.reserve(kFpackHeaderBytes + 4 * (p.labels.size() + p.features.size()));
  out.insert(out.end(), kFpackMagic.begin(), kFpackMagic.end());
  detail::put_u32(out, kFpackVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(p.kind));
  detail::put_u32(out, p.n_items);
  detail::put_u32(out, p.tokens);
  detail::put_u32(out, p.dim);
  for (auto l : p.labels) detail::put_u32(out, l);
  for (float f : p.features) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

/// Decodes an FPACK byte image. Checks run in header order so a corrupted
/// field reports its own error class.
inline FeaturePack decode_fpack(std::span<const unsigned char> bytes) {
  if (bytes.size() < kFpackMagic.size() ||
      std::memcmp(bytes.data(), kFpackMagic.data(), kFpackMagic.size()) != 0) {
    throw FpackError(FpackErrc::kBadMagic, "");
  }
  if (bytes.size() < kFpackHeaderBytes) throw FpackError(FpackErrc::kTruncated, "header");
  const unsigned char* h = bytes.data();
  const std::uint32_t version = detail::get_u32(h + 8);
  if (version != kFpackVersion) throw FpackError(FpackErrc::kVersionMismatch, "got " + std::to_string(version));
  const std::uint32_t kind = detail::get_u32(h + 12);
  if (kind > 1) throw FpackError(FpackErrc::kBadKind, std::to_string(kind));

  FeaturePack p;
  p.kind = static_cast<PackKind>(kind);
  p.n_items = detail::get_u32(h + 16);
  p.tokens = detail::get_u32(h + 20);
  p.dim = detail::get_u32(h + 24);

  // n_items * M * d * 4 can exceed 2^64.
  const unsigned __int128 n_floats = static_cast<unsigned __int128>(p.n_items) * p.tokens * p.dim;
  const unsigned __int128 expected = kFpackHeaderBytes + 4 * static_cast<unsigned __int128>(p.n_items) + 4 * n_floats;
  if (bytes.size() < expected) {
    throw FpackError(FpackErrc::kTruncated, "need " + std::to_string(static_cast<unsigned long long>(
                                                          std::min<unsigned __int128>(expected, ~0ULL))) +
                                                " bytes, have " + std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw FpackError(FpackErrc::kTrailingBytes, std::to_string(bytes.size() - static_cast<std::size_t>(expected)));
  }

  const unsigned char* q = h + kFpackHeaderBytes;
  p.labels.resize(p.n_items);
  for (auto& l : p.labels) {
    l = detail::get_u32(q);
    q += 4;
  }
  p.features.resize(static_cast<std::size_t>(n_floats));
  for (auto& f : p.features) {
    f = std::bit_cast<float>(detail::get_u32(q));
    q += 4;
  }
  validate(p);
  return p;
}

inline void write_fpack(const FeaturePack& p, const std::filesystem::path& path) {
  const auto bytes = encode_fpack(p);
  detail::write_file_bytes(path, bytes);
}

inline FeaturePack read_fpack(const std::filesystem::path& path) {
  std::vector<unsigned char> bytes;
  try {
    bytes = detail::read_file_bytes(path);
  } catch (const DataError& e) {
    throw FpackError(FpackErrc::kIo, e.what());
  }
  return decode_fpack(bytes);
}

}  // namespace flora

#pragma once

// FLORACKP checkpoint container, little-endian:
//
//   magic "FLORACKP" (8) | version u32 (=1) | n_blocks u32
//   per block: name_len u32 | name (UTF-8) | rank u32 | dims u32 x rank |
//              payload binary64 x prod(dims)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flora/error.hpp"
#include "flora/fpack.hpp"
#include "flora/nn.hpp"
#include "flora/tensor.hpp"

namespace flora {

inline constexpr std::string_view kCheckpointMagic = "FLORACKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBlock {
  std::string name;
  Tensor tensor;
};

inline std::vector<unsigned char> encode_checkpoint(std::span<const CheckpointBlock> blocks) {
  std::vector<unsigned char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    detail::put_u32(out, static_cast<std::uint32_t>(b.name.size()));
    out.insert(out.end(), b.name.begin(), b.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(b.tensor.rank()));
    for (std::size_t d : b.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : b.tensor.data()) {
      const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
    }
  }
  return out;
}

inline std::vector<CheckpointBlock> decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  std::size_t pos = 8;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw DataError("checkpoint: truncated");
  };
  auto u32 = [&] {
    need(4);
    const std::uint32_t v = detail::get_u32(bytes.data() + pos);
    pos += 4;
    return v;
  };
  const std::uint32_t version = u32();
  if (version != kCheckpointVersion) throw DataError("checkpoint: version mismatch (got " + std::to_string(version) + ")");
  const std::uint32_t n_blocks = u32();
  std::vector<CheckpointBlock> blocks;
  for (std::uint32_t b = 0; b < n_blocks; ++b) {
    const std::uint32_t name_len = u32();
    need(name_len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    const std::uint32_t rank = u32();
    Shape shape(rank);
    unsigned __int128 count = 1;
    for (auto& d : shape) {
      d = u32();
      count *= d;
    }
    if (count > (bytes.size() - pos) / 8) throw DataError("checkpoint: truncated block " + name);
    std::vector<double> data(static_cast<std::size_t>(count));
    for (double& v : data) {
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
      v = std::bit_cast<double>(bits);
      pos += 8;
    }
    blocks.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (pos != bytes.size()) throw DataError("checkpoint: trailing bytes");
  return blocks;
}

inline void save_checkpoint(const ParamList& params, const std::filesystem::path& path) {
  std::vector<CheckpointBlock> blocks;
  blocks.reserve(params.size());
  for (const auto& p : params) blocks.push_back({p.name, Tensor(p.tensor->shape(), p.tensor->values())});
  detail::write_file_bytes(path, encode_checkpoint(blocks));
}

inline std::vector<CheckpointBlock> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

/// Copies blocks into matching parameters; every parameter must be present
/// with an identical shape.
inline void load_checkpoint(const ParamList& params, const std::filesystem::path& path) {
  const auto blocks = read_checkpoint(path);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& b : blocks) by_name[b.name] = &b.tensor;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint " + path.string() + ": missing parameter " + p.name);
    if (it->second->shape() != p.tensor->shape()) {
      throw DataError("checkpoint " + path.string() + ": parameter " + p.name + " has shape " +
                      shape_str(it->second->shape()) + ", model expects " + shape_str(p.tensor->shape()));
    }
    auto dst = p.tensor->mutable_data();
    std::copy(it->second->data().begin(), it->second->data().end(), dst.begin());
  }
  if (blocks.size() != params.size()) throw DataError("checkpoint " + path.string() + ": unexpected extra parameters");
}

}  // namespace flora

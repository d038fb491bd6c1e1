#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flora/tensor.hpp"

namespace flora {

/// One run-length entry of an Rng call log: `count` consecutive draws of
/// `kind` made while the generator carried `tag`.
struct RngLogEntry {
  enum class Kind { kBits, kUniform, kNormal };
  std::string tag;
  Kind kind;
  std::uint64_t count;
};

using RngLog = std::vector<RngLogEntry>;

/// Counter-based generator: the i-th raw output is a bijective 64-bit mix of
/// (key, i), where key is derived from (seed, stream). Output depends only on
/// the seed, the stream id and the number of previous draws, so the same call
/// sequence reproduces bit-identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  /// Independent generator for a named sub-stream of the same seed.
  Rng substream(std::string_view name) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return Rng(seed_, mix(stream_ ^ h));
  }

  std::uint64_t next_u64() {
    record(RngLogEntry::Kind::kBits);
    return raw();
  }

  /// Uniform double in the open interval (0, 1).
  double uniform() {
    record(RngLogEntry::Kind::kUniform);
    return to_open_unit(raw());
  }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    record(RngLogEntry::Kind::kBits);
    // Multiply-shift; bias is below 2^-64 * n and irrelevant here.
    const unsigned __int128 p = static_cast<unsigned __int128>(raw()) * n;
    return static_cast<std::uint64_t>(p >> 64);
  }

  /// Standard normal via Box-Muller (one value per pair of raw draws).
  double normal() {
    record(RngLogEntry::Kind::kNormal);
    const double u1 = to_open_unit(raw());
    const double u2 = to_open_unit(raw());
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Call logging. The tag names the purpose of subsequent draws.
  void attach_log(RngLog* log) { log_ = log; }
  const std::string& tag() const { return tag_; }
  void set_tag(std::string tag) { tag_ = std::move(tag); }

  /// RAII tag scope.
  class TagScope {
   public:
    TagScope(Rng& rng, std::string tag) : rng_(rng), saved_(rng.tag()) { rng_.set_tag(std::move(tag)); }
    ~TagScope() { rng_.set_tag(std::move(saved_)); }
    TagScope(const TagScope&) = delete;
    TagScope& operator=(const TagScope&) = delete;

   private:
    Rng& rng_;
    std::string saved_;
  };

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static double to_open_unit(std::uint64_t x) { return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53; }

  std::uint64_t raw() { return mix(key_ + 0x9e3779b97f4a7c15ULL * (counter_++)); }

  void record(RngLogEntry::Kind kind) {
    if (log_ == nullptr) return;
    if (!log_->empty() && log_->back().tag == tag_ && log_->back().kind == kind) {
      ++log_->back().count;
    } else {
      log_->push_back({tag_, kind, 1});
    }
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  RngLog* log_ = nullptr;
  std::string tag_;
};

inline Tensor sample_standard_normal(Rng& rng, const Shape& shape) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Maps an underlying standard-normal draw to a logit-normal timestep.
inline double logit_normal_from(double n) {
  // Clamp to keep the result strictly inside (0,1) in floating point.
  const double t = sigmoid(n);
  constexpr double kLo = 0x1.0p-53;
  constexpr double kHi = 1.0 - 0x1.0p-53;
  return std::min(std::max(t, kLo), kHi);
}

inline double logit_normal_timestep(Rng& rng) { return logit_normal_from(rng.normal()); }

}  // namespace flora

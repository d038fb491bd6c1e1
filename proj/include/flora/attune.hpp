#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flora/error.hpp"
#include "flora/tensor.hpp"

namespace flora {

struct Neighbor {
  std::uint32_t class_id;
  double weight;  // cosine similarity to the anchor, in [-1, 1]
};

/// Top-k cosine neighbors of one class, by descending weight.
struct NeighborSet {
  std::uint32_t anchor;
  std::vector<Neighbor> entries;
};

/// Mean over the token axis of a [M x d] feature.
inline std::vector<double> pool_tokens(const Tensor& features) {
  if (features.rank() != 2) throw ShapeError("pool_tokens: expected [M x d]");
  const std::size_t M = features.rows(), d = features.cols();
  if (M == 0) throw ShapeError("pool_tokens: no tokens");
  std::vector<double> out(d, 0.0);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t j = 0; j < d; ++j) out[j] += features.at(m, j);
  for (double& v : out) v /= static_cast<double>(M);
  return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine: zero-norm vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// The k classes most cosine-similar to `anchor`, excluding it; ties go to
/// the lower class index.
inline NeighborSet topk_neighbors(std::uint32_t anchor, std::span<const std::vector<double>> pooled, std::size_t k) {
  const std::size_t n = pooled.size();
  if (anchor >= n) throw ShapeError("topk_neighbors: anchor out of range");
  if (k < 1 || k + 1 > n) {
    throw ConfigError("topk_neighbors: k=" + std::to_string(k) + " outside [1, " + std::to_string(n - 1) + "]");
  }
  NeighborSet out{anchor, {}};
  std::vector<Neighbor> all;
  all.reserve(n - 1);
  for (std::uint32_t c = 0; c < n; ++c) {
    if (c == anchor) continue;
    all.push_back({c, cosine_similarity(pooled[anchor], pooled[c])});
  }
  std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.weight > b.weight; });
  out.entries.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
  return out;
}

/// O = F + (tau / k) * sum_i w_i F_i, over the neighbors' full token matrices.
inline Tensor attune(const Tensor& anchor_features, const NeighborSet& neighbors,
                     std::span<const Tensor> class_features, double tau, std::size_t k) {
  if (k == 0) throw ConfigError("attune: k must be positive");
  Tensor out = anchor_features;
  auto o = out.mutable_data();
  const double c = tau / static_cast<double>(k);
  for (const Neighbor& nb : neighbors.entries) {
    if (nb.class_id >= class_features.size()) throw ShapeError("attune: neighbor id out of range");
    const Tensor& f = class_features[nb.class_id];
    check_same_shape(anchor_features, f, "attune");
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += c * nb.weight * f[i];
  }
  return out;
}

/// Attunes every class against all others. k == 0 returns the input unchanged.
inline std::vector<Tensor> attune_all(std::span<const Tensor> class_features, std::size_t k, double tau) {
  std::vector<Tensor> out(class_features.begin(), class_features.end());
  if (k == 0) return out;
  for (const auto& f : class_features) check_same_shape(class_features.front(), f, "attune_all");
  std::vector<std::vector<double>> pooled;
  pooled.reserve(class_features.size());
  for (const auto& f : class_features) pooled.push_back(pool_tokens(f));
  for (std::uint32_t y = 0; y < class_features.size(); ++y) {
    out[y] = attune(class_features[y], topk_neighbors(y, pooled, k), class_features, tau, k);
  }
  return out;
}

}  // namespace flora

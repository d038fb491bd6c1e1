#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "flora/error.hpp"
#include "flora/fpack.hpp"
#include "flora/rng.hpp"
#include "flora/split.hpp"

namespace flora {

/// Parameters of the synthetic cross-modal benchmark.
///
/// Each class c draws a low-rank code u_c ~ N(0, I_rank). Semantic token m of
/// class c is P_m u_c + token_noise * n, with P_m a fixed random map per token.
/// The skeleton centroid is
///     coupling * G pool(A_c) + (1 - coupling) * xi_c,   xi_c ~ N(0, I),
/// with G a fixed random [d_s x d_a] map scaled so G pool(A_c) has unit
/// entry variance, and every sample adds cluster_spread * N(0, I).
struct SyntheticConfig {
  std::uint32_t n_classes = 20;
  std::uint32_t n_unseen = 5;
  std::uint32_t samples_per_class = 50;
  std::uint32_t d_s = 64;
  std::uint32_t d_a = 48;
  std::uint32_t tokens = 4;  // M_a
  double cluster_spread = 0.3;
  double coupling = 0.8;
  std::uint32_t semantic_rank = 8;
  double token_noise = 0.1;
  std::uint64_t seed = 7;
};

inline void validate(const SyntheticConfig& c) {
  if (c.n_classes < 2) throw ConfigError("synthetic: need at least two classes");
  if (c.n_unseen >= c.n_classes) throw ConfigError("synthetic: n_unseen must be < n_classes");
  if (c.samples_per_class == 0) throw ConfigError("synthetic: samples_per_class must be positive");
  if (c.d_s == 0 || c.d_a == 0 || c.tokens == 0) throw ConfigError("synthetic: dimensions must be positive");
  if (!(c.cluster_spread > 0.0)) throw ConfigError("synthetic: cluster_spread must be > 0");
  if (!(c.coupling >= 0.0 && c.coupling <= 1.0)) throw ConfigError("synthetic: coupling must lie in [0,1]");
  if (c.semantic_rank == 0) throw ConfigError("synthetic: semantic_rank must be positive");
  if (!(c.token_noise >= 0.0)) throw ConfigError("synthetic: token_noise must be >= 0");
}

struct SyntheticData {
  FeaturePack skeleton;
  FeaturePack semantic;
  SplitSpec split;
  /// Noise-free class centroids [n_classes x d_s], kept for oracles.
  std::vector<std::vector<double>> centroids;
};

inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  Rng root(cfg.seed, 0x5e7d);
  const std::uint32_t C = cfg.n_classes, M = cfg.tokens, da = cfg.d_a, ds = cfg.d_s, r = cfg.semantic_rank;

  // Unseen classes: first n_unseen entries of a seeded permutation.
  Rng split_rng = root.substream("split");
  std::vector<std::uint32_t> perm(C);
  std::iota(perm.begin(), perm.end(), 0u);
  for (std::uint32_t i = C - 1; i > 0; --i) std::swap(perm[i], perm[split_rng.uniform_index(i + 1)]);
  std::vector<long long> unseen(perm.begin(), perm.begin() + cfg.n_unseen);

  Rng sem_rng = root.substream("semantic");
  const double p_scale = 1.0 / std::sqrt(static_cast<double>(r));
  std::vector<double> token_maps(static_cast<std::size_t>(M) * da * r);
  for (double& v : token_maps) v = p_scale * sem_rng.normal();

  std::vector<double> anchors(static_cast<std::size_t>(C) * M * da);
  std::vector<double> pooled(static_cast<std::size_t>(C) * da, 0.0);
  for (std::uint32_t c = 0; c < C; ++c) {
    std::vector<double> code(r);
    for (double& u : code) u = sem_rng.normal();
    for (std::uint32_t m = 0; m < M; ++m) {
      for (std::uint32_t j = 0; j < da; ++j) {
        double v = 0.0;
        for (std::uint32_t k = 0; k < r; ++k) v += token_maps[(static_cast<std::size_t>(m) * da + j) * r + k] * code[k];
        v += cfg.token_noise * sem_rng.normal();
        anchors[(static_cast<std::size_t>(c) * M + m) * da + j] = v;
        pooled[static_cast<std::size_t>(c) * da + j] += v / M;
      }
    }
  }

  // Entries of pool(A_c) have variance (1 + token_noise^2) / M.
  Rng skel_rng = root.substream("skeleton");
  const double pooled_var = (1.0 + cfg.token_noise * cfg.token_noise) / M;
  const double g_scale = 1.0 / std::sqrt(static_cast<double>(da) * pooled_var);
  std::vector<double> modality_map(static_cast<std::size_t>(ds) * da);
  for (double& v : modality_map) v = g_scale * skel_rng.normal();

  SyntheticData out;
  out.centroids.assign(C, std::vector<double>(ds));
  for (std::uint32_t c = 0; c < C; ++c) {
    for (std::uint32_t i = 0; i < ds; ++i) {
      double image = 0.0;
      for (std::uint32_t j = 0; j < da; ++j)
        image += modality_map[static_cast<std::size_t>(i) * da + j] * pooled[static_cast<std::size_t>(c) * da + j];
      const double noise = skel_rng.normal();
      out.centroids[c][i] = cfg.coupling * image + (1.0 - cfg.coupling) * noise;
    }
  }

  auto& sk = out.skeleton;
  sk.kind = PackKind::kSkeleton;
  sk.n_items = C * cfg.samples_per_class;
  sk.tokens = 1;
  sk.dim = ds;
  sk.features.reserve(static_cast<std::size_t>(sk.n_items) * ds);
  for (std::uint32_t c = 0; c < C; ++c) {
    for (std::uint32_t s = 0; s < cfg.samples_per_class; ++s) {
      sk.labels.push_back(c);
      for (std::uint32_t i = 0; i < ds; ++i) {
        sk.features.push_back(static_cast<float>(out.centroids[c][i] + cfg.cluster_spread * skel_rng.normal()));
      }
    }
  }

  auto& se = out.semantic;
  se.kind = PackKind::kSemantic;
  se.n_items = C;
  se.tokens = M;
  se.dim = da;
  se.features.assign(anchors.begin(), anchors.end());
  se.labels.resize(C);
  std::iota(se.labels.begin(), se.labels.end(), 0u);

  for (std::uint32_t c = 0; c < C; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "class_%03u", c);
    sk.class_names.emplace_back(name);
    se.class_names.emplace_back(name);
  }

  out.split = make_split(C, unseen);
  return out;
}

/// Fraction of skeleton items whose nearest empirical class mean (squared
/// Euclidean distance, ties to the lower class id) is their own class.
inline double nearest_centroid_accuracy(const FeaturePack& skeleton) {
  if (skeleton.n_items == 0) return 0.0;
  const std::size_t d = std::size_t{skeleton.tokens} * skeleton.dim;
  const std::uint32_t C = *std::max_element(skeleton.labels.begin(), skeleton.labels.end()) + 1;
  std::vector<double> mean(std::size_t{C} * d, 0.0);
  std::vector<std::size_t> count(C, 0);
  for (std::uint32_t i = 0; i < skeleton.n_items; ++i) {
    const auto x = skeleton.item(i);
    const std::uint32_t c = skeleton.labels[i];
    ++count[c];
    for (std::size_t j = 0; j < d; ++j) mean[c * d + j] += x[j];
  }
  for (std::uint32_t c = 0; c < C; ++c) {
    if (count[c] == 0) continue;
    for (std::size_t j = 0; j < d; ++j) mean[c * d + j] /= static_cast<double>(count[c]);
  }
  std::size_t correct = 0;
  for (std::uint32_t i = 0; i < skeleton.n_items; ++i) {
    const auto x = skeleton.item(i);
    std::uint32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::uint32_t c = 0; c < C; ++c) {
      if (count[c] == 0) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = x[j] - mean[c * d + j];
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    correct += best == skeleton.labels[i];
  }
  return static_cast<double>(correct) / skeleton.n_items;
}

}  // namespace flora

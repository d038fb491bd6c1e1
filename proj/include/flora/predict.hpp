#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flora/adamw.hpp"
#include "flora/align.hpp"
#include "flora/attune.hpp"
#include "flora/error.hpp"
#include "flora/flow.hpp"
#include "flora/split.hpp"

namespace flora {

struct PredictConfig {
  double t = 0.1;
  double gamma = 0.75;
  double alpha = 1e9;
  double sigma_min = kDefaultSigmaMin;
  /// When nonempty, velocity errors are averaged over these timesteps
  /// instead of using `t` alone.
  std::vector<double> t_list;
  std::size_t n_synth = 50;
  std::size_t linear_iterations = 300;
  double linear_lr = 1e-2;
};

inline void validate(const PredictConfig& c) {
  if (!(c.t >= 0.0 && c.t < 1.0)) throw ConfigError("predict: t must lie in [0,1)");
  for (double t : c.t_list)
    if (!(t >= 0.0 && t < 1.0)) throw ConfigError("predict: t_list entries must lie in [0,1)");
  if (!(c.gamma >= 0.0)) throw ConfigError("predict: gamma must be >= 0");
  if (!(c.alpha > 1e6)) throw ConfigError("predict: alpha must exceed 1e6");
}

enum class Protocol { kZsl, kGzsl };

inline Protocol parse_protocol(const std::string& s) {
  if (s == "zsl") return Protocol::kZsl;
  if (s == "gzsl") return Protocol::kGzsl;
  throw ConfigError("unknown protocol '" + s + "' (expected zsl|gzsl)");
}

inline const char* to_string(Protocol p) { return p == Protocol::kZsl ? "zsl" : "gzsl"; }

/// epsilon_y = || v_theta(z_t, t) - v* ||_2 for the pairing (z_a -> z_s).
inline double velocity_error(FlowNet& net, const Tensor& z_s, const Tensor& z_a, double t,
                             double sigma_min = kDefaultSigmaMin) {
  check_same_shape(z_s, z_a, "velocity_error");
  const Tensor zt = interpolate(z_a, z_s, t, sigma_min);
  const Tensor vstar = gt_velocity(z_a, z_s, sigma_min);
  const Tensor vhat = velocity_forward(net, zt, t);
  double s = 0.0;
  for (std::size_t i = 0; i < vhat.size(); ++i) s += (vhat[i] - vstar[i]) * (vhat[i] - vstar[i]);
  return std::sqrt(s);
}

/// Velocity errors for every (item, candidate) pairing: result[n][c].
/// Evaluated in chunks on non-recording tapes.
inline std::vector<std::vector<double>> velocity_errors(FlowNet& net, std::span<const Tensor> z_s,
                                                        std::span<const Tensor> candidates, const PredictConfig& cfg) {
  const std::size_t N = z_s.size(), C = candidates.size();
  std::vector<std::vector<double>> eps(N, std::vector<double>(C, 0.0));
  if (N == 0 || C == 0) return eps;
  const std::size_t M = z_s.front().rows(), L = z_s.front().cols();
  for (const auto& z : z_s) check_same_shape(z_s.front(), z, "velocity_errors");
  for (const auto& z : candidates) check_same_shape(z_s.front(), z, "velocity_errors");

  const std::vector<double> ts = cfg.t_list.empty() ? std::vector<double>{cfg.t} : cfg.t_list;
  const std::size_t pairs = N * C;
  const std::size_t chunk = 1024;
  const double a0 = 1.0 - cfg.sigma_min;
  for (double t : ts) {
    const double a = 1.0 - a0 * t;
    for (std::size_t start = 0; start < pairs; start += chunk) {
      const std::size_t count = std::min(chunk, pairs - start);
      std::vector<double> zt(count * M * L), vstar(count * M * L);
      for (std::size_t p = 0; p < count; ++p) {
        const std::size_t n = (start + p) / C, c = (start + p) % C;
        const auto s = z_s[n].data();
        const auto za = candidates[c].data();
        for (std::size_t e = 0; e < M * L; ++e) {
          zt[p * M * L + e] = a * za[e] + t * s[e];
          vstar[p * M * L + e] = s[e] - a0 * za[e];
        }
      }
      Tape tape(false);
      const std::vector<double> tv(count, t);
      const Tensor vhat = net.forward(tape, tape.constant(Tensor(Shape{count * M, L}, std::move(zt))), tv, M).value();
      for (std::size_t p = 0; p < count; ++p) {
        double s = 0.0;
        for (std::size_t e = 0; e < M * L; ++e) {
          const double d = vhat[p * M * L + e] - vstar[p * M * L + e];
          s += d * d;
        }
        eps[(start + p) / C][(start + p) % C] += std::sqrt(s) / static_cast<double>(ts.size());
      }
    }
  }
  return eps;
}

/// argmin over candidates; `ids` must be ascending so ties go to the lower id.
inline std::uint32_t argmin_class(std::span<const double> eps, std::span<const std::uint32_t> ids) {
  if (eps.empty() || eps.size() != ids.size()) throw NumericError("argmin: empty or misaligned candidate set");
  std::size_t best = 0;
  for (std::size_t c = 1; c < eps.size(); ++c)
    if (eps[c] < eps[best]) best = c;
  return ids[best];
}

/// ZSL decision: the unseen candidate with the smallest velocity error.
inline std::uint32_t zsl_predict(FlowNet& net, const Tensor& z_s, std::span<const Tensor> candidates,
                                 std::span<const std::uint32_t> ids, const PredictConfig& cfg) {
  if (candidates.empty()) throw NumericError("zsl_predict: empty candidate set");
  const Tensor one[1] = {z_s};
  const auto eps = velocity_errors(net, one, candidates, cfg);
  return argmin_class(eps.front(), ids);
}

/// GZSL decision: the ratio of best seen to best unseen error picks a domain
/// (ratio <= gamma -> seen), and a penalty alpha is added to every candidate
/// of the other domain. A 0/0 ratio counts as 1.
inline std::uint32_t gzsl_decide(std::span<const double> eps, std::span<const std::uint32_t> ids,
                                 const SplitSpec& split, const PredictConfig& cfg) {
  if (eps.size() != ids.size() || eps.empty()) throw NumericError("gzsl: misaligned candidate set");
  double ds = std::numeric_limits<double>::infinity(), du = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < ids.size(); ++c) {
    if (split.is_seen(ids[c])) ds = std::min(ds, eps[c]);
    else if (split.is_unseen(ids[c])) du = std::min(du, eps[c]);
    else throw DataError("gzsl: candidate " + std::to_string(ids[c]) + " is outside the split");
  }
  if (!std::isfinite(ds) || !std::isfinite(du)) throw DataError("gzsl: both domains need candidates");
  double ratio;
  if (du == 0.0) ratio = (ds == 0.0) ? 1.0 : std::numeric_limits<double>::infinity();
  else ratio = ds / du;
  const bool seen_domain = ratio <= cfg.gamma;
  std::vector<double> scored(eps.begin(), eps.end());
  for (std::size_t c = 0; c < ids.size(); ++c) {
    if (split.is_seen(ids[c]) != seen_domain) scored[c] += cfg.alpha;
  }
  return argmin_class(scored, ids);
}

inline std::uint32_t gzsl_predict(FlowNet& net, const Tensor& z_s, std::span<const Tensor> candidates,
                                  std::span<const std::uint32_t> ids, const SplitSpec& split,
                                  const PredictConfig& cfg) {
  const Tensor one[1] = {z_s};
  const auto eps = velocity_errors(net, one, candidates, cfg);
  return gzsl_decide(eps.front(), ids, split, cfg);
}

inline double harmonic_mean(double s, double u) { return (s + u) == 0.0 ? 0.0 : 2.0 * s * u / (s + u); }

struct ClassAccuracy {
  std::uint32_t class_id;
  std::size_t total;
  std::size_t correct;
  double accuracy;
};

struct ConfusionCell {
  std::uint32_t truth;
  std::uint32_t predicted;
  std::size_t count;
};

/// Accuracies are fractions in [0,1].
struct EvalReport {
  Protocol protocol = Protocol::kZsl;
  std::string classifier = "flow";
  std::size_t n_items = 0;
  double acc = 0;  // ZSL top-1 over unseen test items
  double seen = 0, unseen = 0, harmonic = 0;
  std::size_t n_seen = 0, n_unseen = 0;
  std::vector<ClassAccuracy> per_class;
  std::vector<ConfusionCell> confusion;
  nlohmann::ordered_json config;
  std::uint64_t seed = 0;
};

inline EvalReport evaluate(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels,
                           const SplitSpec& split, Protocol protocol) {
  if (predictions.size() != labels.size()) throw DataError("evaluate: predictions and labels differ in length");
  EvalReport r;
  r.protocol = protocol;
  r.n_items = labels.size();
  std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> per;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> conf;
  std::size_t seen_ok = 0, unseen_ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::uint32_t y = labels[i];
    const bool is_seen = split.is_seen(y);
    const bool is_unseen = split.is_unseen(y);
    if (!is_unseen && !(protocol == Protocol::kGzsl && is_seen)) {
      throw DataError("evaluate: label " + std::to_string(y) + " is outside the " + to_string(protocol) + " split");
    }
    const bool ok = predictions[i] == y;
    auto& pc = per[y];
    ++pc.first;
    pc.second += ok;
    ++conf[{y, predictions[i]}];
    if (is_seen) {
      ++r.n_seen;
      seen_ok += ok;
    } else {
      ++r.n_unseen;
      unseen_ok += ok;
    }
  }
  for (const auto& [c, v] : per) {
    r.per_class.push_back({c, v.first, v.second, static_cast<double>(v.second) / static_cast<double>(v.first)});
  }
  for (const auto& [k, n] : conf) r.confusion.push_back({k.first, k.second, n});
  r.unseen = r.n_unseen ? static_cast<double>(unseen_ok) / static_cast<double>(r.n_unseen) : 0.0;
  if (protocol == Protocol::kZsl) {
    r.acc = r.unseen;
  } else {
    r.seen = r.n_seen ? static_cast<double>(seen_ok) / static_cast<double>(r.n_seen) : 0.0;
    r.harmonic = harmonic_mean(r.seen, r.unseen);
  }
  return r;
}

/// Stable-key-order JSON document for a report.
inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["protocol"] = to_string(r.protocol);
  j["classifier"] = r.classifier;
  j["seed"] = r.seed;
  j["n_items"] = r.n_items;
  if (r.protocol == Protocol::kZsl) {
    j["acc"] = r.acc;
  } else {
    j["S"] = r.seen;
    j["U"] = r.unseen;
    j["H"] = r.harmonic;
    j["n_seen"] = r.n_seen;
    j["n_unseen"] = r.n_unseen;
  }
  auto& pc = j["per_class"] = nlohmann::ordered_json::array();
  for (const auto& c : r.per_class) {
    pc.push_back({{"class", c.class_id}, {"total", c.total}, {"correct", c.correct}, {"acc", c.accuracy}});
  }
  auto& cf = j["confusion"] = nlohmann::ordered_json::array();
  for (const auto& c : r.confusion) cf.push_back({{"true", c.truth}, {"pred", c.predicted}, {"count", c.count}});
  j["config"] = r.config;
  return j;
}

/// Plain-text table with Acc / S / U / H in percent.
inline std::string report_table(const EvalReport& r) {
  char buf[256];
  std::string out = "classifier  protocol   Acc     S       U       H\n";
  if (r.protocol == Protocol::kZsl) {
    std::snprintf(buf, sizeof buf, "%-10s  %-8s  %6.1f  %6s  %6s  %6s\n", r.classifier.c_str(), "zsl", 100.0 * r.acc,
                  "-", "-", "-");
  } else {
    std::snprintf(buf, sizeof buf, "%-10s  %-8s  %6s  %6.1f  %6.1f  %6.1f\n", r.classifier.c_str(), "gzsl", "-",
                  100.0 * r.seen, 100.0 * r.unseen, 100.0 * r.harmonic);
  }
  return out + buf;
}

// Baselines ------------------------------------------------------------------

/// Index into `candidates` of the highest cosine similarity between
/// token-pooled latents; ties go to the lower index.
inline std::size_t baseline_similarity(const Tensor& z_s, std::span<const Tensor> candidates) {
  if (candidates.empty()) throw NumericError("baseline_similarity: empty candidate set");
  const auto q = pool_tokens(z_s);
  std::size_t best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const double s = cosine_similarity(q, pool_tokens(candidates[c]));
    if (s > best_sim) {
      best_sim = s;
      best = c;
    }
  }
  return best;
}

/// Softmax linear classifier over raw skeleton features, trained on skeleton
/// features synthesized from unseen-class semantic latents.
class LinearBaseline {
 public:
  /// `semantics` holds the attuned semantic features of `class_ids`.
  LinearBaseline(VaePair& pair, std::span<const Tensor> semantics, std::vector<std::uint32_t> class_ids, Rng& rng,
                 const PredictConfig& cfg)
      : ids_(std::move(class_ids)) {
    if (cfg.n_synth == 0) throw ConfigError("linear baseline: n_synth must be positive");
    if (semantics.size() != ids_.size() || ids_.empty()) throw DataError("linear baseline: bad candidate set");
    std::vector<Tensor> rows;
    std::vector<std::size_t> targets;
    for (std::size_t c = 0; c < ids_.size(); ++c) {
      const LatentStats st = encode(pair.semantic, semantics[c], nullptr, EncodeMode::kMean).stats;
      for (std::size_t s = 0; s < cfg.n_synth; ++s) {
        Tensor eps;
        {
          Rng::TagScope scope(rng, "synth");
          eps = sample_standard_normal(rng, st.mu.shape());
        }
        std::vector<double> z(st.mu.size());
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = st.mu[i] + std::exp(0.5 * st.logvar[i]) * eps[i];
        Tape tape(false);
        const Tensor x = pair.skeleton.decode(tape, tape.constant(Tensor(st.mu.shape(), std::move(z)))).value();
        const auto pooled = pool_tokens(x);
        rows.push_back(Tensor(Shape{1, pooled.size()}, pooled));
        targets.push_back(c);
      }
    }
    const Tensor X = vstack(rows);
    {
      Rng::TagScope scope(rng, "init");
      layer_ = Linear(X.cols(), ids_.size(), rng);
    }
    ParamList params;
    layer_.collect("linear", params);
    AdamW opt(params, AdamWConfig{cfg.linear_lr, 0.9, 0.999, 1e-8, 0.0});
    for (std::size_t it = 0; it < cfg.linear_iterations; ++it) {
      Tape tape;
      Var loss = ops::cross_entropy(layer_(tape, tape.constant(X)), targets);
      tape.backward(loss);
      opt.step();
      final_loss_ = loss.item();
    }
    // Training accuracy on the synthesized set.
    const auto pred = predict_rows(X);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == ids_[targets[i]];
    train_accuracy_ = static_cast<double>(ok) / static_cast<double>(pred.size());
  }

  /// Class id for each row of raw skeleton features [n x d_s].
  std::vector<std::uint32_t> predict_rows(const Tensor& x) {
    Tape tape(false);
    const Tensor logits = layer_(tape, tape.constant(x)).value();
    std::vector<std::uint32_t> out(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < ids_.size(); ++c)
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      out[r] = ids_[best];
    }
    return out;
  }

  double train_accuracy() const { return train_accuracy_; }
  double final_loss() const { return final_loss_; }

 private:
  std::vector<std::uint32_t> ids_;
  Linear layer_;
  double train_accuracy_ = 0;
  double final_loss_ = 0;
};

}  // namespace flora

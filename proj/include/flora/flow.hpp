#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flora/adamw.hpp"
#include "flora/align.hpp"
#include "flora/error.hpp"
#include "flora/nn.hpp"
#include "flora/ops.hpp"
#include "flora/rng.hpp"
#include "flora/tape.hpp"
#include "flora/tensor.hpp"

namespace flora {

inline constexpr double kDefaultSigmaMin = 1e-5;

/// z_t = [1 - (1 - sigma_min) t] z0 + t z1
inline Tensor interpolate(const Tensor& z0, const Tensor& z1, double t, double sigma_min = kDefaultSigmaMin) {
  check_same_shape(z0, z1, "interpolate");
  if (!(t >= 0.0 && t <= 1.0)) throw NumericError("interpolate: t=" + std::to_string(t) + " outside [0,1]");
  const double a = 1.0 - (1.0 - sigma_min) * t;
  std::vector<double> out(z0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + t * z1[i];
  return Tensor(z0.shape(), std::move(out));
}

/// v* = z1 - (1 - sigma_min) z0, the time derivative of the linear path.
inline Tensor gt_velocity(const Tensor& z0, const Tensor& z1, double sigma_min = kDefaultSigmaMin) {
  check_same_shape(z0, z1, "gt_velocity");
  const double a = 1.0 - sigma_min;
  std::vector<double> out(z0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z1[i] - a * z0[i];
  return Tensor(z0.shape(), std::move(out));
}

enum class Backbone { kModulated, kPlainMlp };

inline const char* to_string(Backbone b) { return b == Backbone::kModulated ? "modulated" : "plain_mlp"; }

inline Backbone parse_backbone(const std::string& s) {
  if (s == "modulated" || s == "dit") return Backbone::kModulated;
  if (s == "plain_mlp" || s == "mlp") return Backbone::kPlainMlp;
  throw ConfigError("unknown flow backbone '" + s + "' (expected modulated|plain_mlp)");
}

struct FlowNetConfig {
  std::size_t latent_dim = 64;
  std::size_t width = 128;
  std::size_t mlp_hidden = 256;
  std::size_t embed_dim = 128;
  std::size_t frequencies = 64;
  Backbone backbone = Backbone::kModulated;
  bool token_attention = false;
};

/// Sinusoidal timestep features [cos | sin] over geometrically spaced
/// frequencies, one row per entry of `t`.
inline Tensor timestep_features(std::span<const double> t, std::size_t frequencies) {
  std::vector<double> out(t.size() * 2 * frequencies);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t i = 0; i < frequencies; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(frequencies));
      const double arg = 1000.0 * t[r] * freq;
      out[r * 2 * frequencies + i] = std::cos(arg);
      out[r * 2 * frequencies + frequencies + i] = std::sin(arg);
    }
  }
  return Tensor(Shape{t.size(), 2 * frequencies}, std::move(out));
}

/// Timestep-conditioned velocity field over latent tokens. There is no class
/// or text input: t is the only conditioning signal.
///
/// modulated:  x = W_in z;  x += MLP(LN(x) * (1 + scale(t)) + shift(t));
///             [x += Attn(LN(x)) within each item's tokens];  v = W_out x
/// plain_mlp:  v = W_out silu(W_2 silu(W_1 [z | emb(t)]))
/// W_out starts at zero, so a fresh net is the zero field.
class FlowNet {
 public:
  FlowNet() = default;
  FlowNet(const FlowNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    Rng::TagScope scope(rng, "init");
    const std::size_t L = cfg.latent_dim, D = cfg.width, E = cfg.embed_dim;
    t_fc1_ = Linear(2 * cfg.frequencies, E, rng);
    t_fc2_ = Linear(E, E, rng);
    if (cfg.backbone == Backbone::kModulated) {
      in_ = Linear(L, D, rng);
      ada_ = Linear(E, 2 * D, rng);
      mlp1_ = Linear(D, cfg.mlp_hidden, rng);
      mlp2_ = Linear(cfg.mlp_hidden, D, rng);
      if (cfg.token_attention) {
        wq_ = Linear(D, D, rng);
        wk_ = Linear(D, D, rng);
        wv_ = Linear(D, D, rng);
        wo_ = Linear(D, D, rng);
      }
      out_ = Linear::zeros(D, L);
    } else {
      mlp1_ = Linear(L + E, D, rng);
      mlp2_ = Linear(D, D, rng);
      out_ = Linear::zeros(D, L);
    }
  }

  const FlowNetConfig& config() const { return cfg_; }
  std::size_t latent_dim() const { return cfg_.latent_dim; }

  /// z_t is [items * tokens x latent_dim]; t holds one value per item.
  Var forward(Tape& tape, Var z_t, std::span<const double> t, std::size_t tokens) {
    if (z_t.cols() != cfg_.latent_dim) {
      throw ShapeError("flow: input width " + std::to_string(z_t.cols()) + " != latent_dim " +
                       std::to_string(cfg_.latent_dim));
    }
    if (tokens == 0 || z_t.rows() != t.size() * tokens) throw ShapeError("flow: rows != items * tokens");
    std::vector<double> t_rows;
    t_rows.reserve(z_t.rows());
    for (double ti : t)
      for (std::size_t m = 0; m < tokens; ++m) t_rows.push_back(ti);
    Var emb = t_fc2_(tape, ops::silu(t_fc1_(tape, tape.constant(timestep_features(t_rows, cfg_.frequencies)))));

    if (cfg_.backbone == Backbone::kPlainMlp) {
      Var h = ops::silu(mlp1_(tape, ops::concat_cols(z_t, emb)));
      h = ops::silu(mlp2_(tape, h));
      return out_(tape, h);
    }
    const std::size_t D = cfg_.width;
    Var x = in_(tape, z_t);
    Var mod = ada_(tape, ops::silu(emb));
    Var shift = ops::slice_cols(mod, 0, D);
    Var scale = ops::slice_cols(mod, D, 2 * D);
    Var h = ops::layer_norm(x);
    h = ops::add(ops::add(h, ops::mul(h, scale)), shift);
    h = mlp2_(tape, ops::silu(mlp1_(tape, h)));
    x = ops::add(x, h);
    if (cfg_.token_attention) {
      Var a = ops::layer_norm(x);
      // Keys are bias-free: a key bias shifts all of a query's scores equally.
      Var k = ops::matmul(a, tape.param(wk_.weight));
      Var att = ops::token_attention(wq_(tape, a), k, wv_(tape, a), tokens);
      x = ops::add(x, wo_(tape, att));
    }
    return out_(tape, x);
  }

  ParamList parameters() {
    ParamList out;
    t_fc1_.collect("flow.t_fc1", out);
    t_fc2_.collect("flow.t_fc2", out);
    if (cfg_.backbone == Backbone::kModulated) {
      in_.collect("flow.in", out);
      ada_.collect("flow.ada", out);
    }
    mlp1_.collect("flow.mlp1", out);
    mlp2_.collect("flow.mlp2", out);
    if (cfg_.backbone == Backbone::kModulated && cfg_.token_attention) {
      wq_.collect("flow.attn_q", out);
      out.push_back({"flow.attn_k.weight", &wk_.weight});
      wv_.collect("flow.attn_v", out);
      wo_.collect("flow.attn_o", out);
    }
    out_.collect("flow.out", out);
    return out;
  }

  /// Output-projection access, used to pin the field in tests.
  Linear& output_layer() { return out_; }

 private:
  FlowNetConfig cfg_;
  Linear t_fc1_, t_fc2_, in_, ada_, mlp1_, mlp2_, wq_, wk_, wv_, wo_, out_;
};

/// Velocity prediction on a throwaway non-recording tape; `z_t` is one item.
inline Tensor velocity_forward(FlowNet& net, const Tensor& z_t, double t) {
  Tape tape(false);
  const double ts[1] = {t};
  return net.forward(tape, tape.constant(z_t), ts, z_t.rows()).value();
}

enum class TimestepSampler { kLogitNormal, kUniform };

inline TimestepSampler parse_sampler(const std::string& s) {
  if (s == "logit_normal") return TimestepSampler::kLogitNormal;
  if (s == "uniform") return TimestepSampler::kUniform;
  throw ConfigError("unknown timestep sampler '" + s + "' (expected logit_normal|uniform)");
}

inline const char* to_string(TimestepSampler s) {
  return s == TimestepSampler::kLogitNormal ? "logit_normal" : "uniform";
}

struct FlowTrainConfig {
  std::size_t iterations = 200;
  std::size_t batch = 64;
  double lambda_flow = 0.1;
  TimestepSampler sampler = TimestepSampler::kLogitNormal;
  double sigma_min = kDefaultSigmaMin;
  AdamWConfig optim{};
};

inline void validate(const FlowTrainConfig& c) {
  if (!(c.lambda_flow >= 0.0)) throw ConfigError("flow: lambda_flow must be >= 0");
  if (!(c.sigma_min > 0.0)) throw ConfigError("flow: sigma_min must be > 0");
}

inline double draw_timestep(Rng& rng, TimestepSampler s) {
  Rng::TagScope scope(rng, "timestep");
  return s == TimestepSampler::kLogitNormal ? logit_normal_timestep(rng) : rng.uniform();
}

struct FlowLoss {
  Var total;
  double positive = 0;  // mean squared velocity error against the own pair
  double negative = 0;  // same against the shifted other-class pair (masked)
  double value = 0;
  std::size_t negatives = 0;  // items that contributed a negative term
};

/// Contrastive flow-matching loss for items i with source z0 (semantic
/// latent) and target z1 (skeleton latent), stacked as [B * tokens x L].
/// Item i's negative target is the ground-truth velocity of item (i+1) mod B,
/// skipped when both share a class. Normalized by the entry count B*tokens*L.
inline FlowLoss conflow_loss_at(Tape& tape, FlowNet& net, const Tensor& z0, const Tensor& z1,
                                std::span<const std::uint32_t> labels, std::span<const double> t, std::size_t tokens,
                                double lambda_flow, double sigma_min) {
  check_same_shape(z0, z1, "conflow_loss");
  const std::size_t B = labels.size();
  if (B == 0) throw NumericError("conflow_loss: empty batch");
  if (t.size() != B) throw ShapeError("conflow_loss: one timestep per item required");
  if (z0.rows() != B * tokens) throw ShapeError("conflow_loss: rows != items * tokens");
  if (lambda_flow > 0.0 && B < 2) throw NumericError("conflow_loss: contrastive term needs at least 2 items");
  const std::size_t L = z0.cols();
  const std::size_t per_item = tokens * L;

  std::vector<double> zt(z0.size()), vstar(z0.size()), vneg(z0.size());
  for (std::size_t i = 0; i < B; ++i) {
    const double a = 1.0 - (1.0 - sigma_min) * t[i];
    for (std::size_t e = 0; e < per_item; ++e) {
      const std::size_t k = i * per_item + e;
      zt[k] = a * z0[k] + t[i] * z1[k];
      vstar[k] = z1[k] - (1.0 - sigma_min) * z0[k];
    }
  }
  std::vector<double> mask(B * tokens, 0.0);
  std::size_t negatives = 0;
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t j = (i + 1) % B;
    std::copy_n(vstar.begin() + static_cast<std::ptrdiff_t>(j * per_item), per_item,
                vneg.begin() + static_cast<std::ptrdiff_t>(i * per_item));
    if (labels[i] != labels[j]) {
      ++negatives;
      for (std::size_t m = 0; m < tokens; ++m) mask[i * tokens + m] = 1.0;
    }
  }

  const double inv = 1.0 / static_cast<double>(z0.size());
  Var vhat = net.forward(tape, tape.constant(Tensor(z0.shape(), std::move(zt))), t, tokens);
  Var pos = ops::sum_sq(ops::sub(vhat, tape.constant(Tensor(z0.shape(), std::move(vstar)))), inv);
  FlowLoss out;
  out.positive = pos.item();
  out.negatives = negatives;
  if (lambda_flow > 0.0) {
    Var neg = ops::row_weighted_sum_sq(ops::sub(vhat, tape.constant(Tensor(z0.shape(), std::move(vneg)))),
                                       std::move(mask), inv);
    out.negative = neg.item();
    out.total = ops::sub(pos, ops::scale(neg, lambda_flow));
  } else {
    out.total = pos;
  }
  out.value = out.total.item();
  return out;
}

/// Draws one timestep per item from the configured sampler, then evaluates
/// the loss.
inline FlowLoss conflow_loss(Tape& tape, FlowNet& net, const Tensor& z0, const Tensor& z1,
                             std::span<const std::uint32_t> labels, std::size_t tokens, Rng& rng,
                             const FlowTrainConfig& cfg) {
  std::vector<double> t(labels.size());
  for (double& ti : t) ti = draw_timestep(rng, cfg.sampler);
  return conflow_loss_at(tape, net, z0, z1, labels, t, tokens, cfg.lambda_flow, cfg.sigma_min);
}

/// Mean-mode latents of every item (skeleton, expanded to M tokens) and
/// every class (semantic); used for stage-2 training and inference.
struct LatentBank {
  std::vector<Tensor> skeleton;  // per item [M x L]
  std::vector<Tensor> semantic;  // per class [M x L]
};

inline LatentBank encode_mean_latents(VaePair& pair, const AlignData& data, std::span<const std::size_t> items) {
  LatentBank bank;
  const std::size_t M = data.tokens();
  bank.skeleton.resize(data.skeleton.rows());
  if (!items.empty()) {
    std::vector<double> rows;
    const std::size_t ds = data.skeleton.cols();
    rows.reserve(items.size() * M * ds);
    for (std::size_t i : items) {
      const double* r = data.skeleton.data().data() + i * ds;
      for (std::size_t m = 0; m < M; ++m) rows.insert(rows.end(), r, r + ds);
    }
    const Tensor z = encode(pair.skeleton, Tensor(Shape{items.size() * M, ds}, std::move(rows)), nullptr,
                            EncodeMode::kMean).z;
    const std::size_t L = z.cols();
    for (std::size_t n = 0; n < items.size(); ++n) {
      const auto first = z.data().begin() + static_cast<std::ptrdiff_t>(n * M * L);
      bank.skeleton[items[n]] = Tensor(Shape{M, L}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(M * L)));
    }
  }
  for (const Tensor& s : data.semantics) bank.semantic.push_back(encode(pair.semantic, s, nullptr, EncodeMode::kMean).z);
  return bank;
}

struct FlowTraceRow {
  std::size_t iter;
  double loss;
  double positive;
  double negative;
};

/// Stage-2 training: semantic latents (source) are transported to skeleton
/// latents (target) of seen-class training items. Latents are mean-mode
/// encodings of the frozen VAE pair, so no Gaussian noise enters z0.
inline std::vector<FlowTraceRow> train_flow(FlowNet& net, VaePair& pair, const AlignData& data,
                                            const FlowTrainConfig& cfg, Rng& rng) {
  if (!pair.frozen()) throw NumericError("train_flow: VAE pair must be frozen before stage 2");
  validate(cfg);
  validate(data);
  if (net.latent_dim() != pair.latent_dim()) throw ShapeError("train_flow: flow and VAE latent widths differ");
  std::vector<FlowTraceRow> trace;
  if (cfg.iterations == 0) return trace;
  if (data.train_items.empty()) throw DataError("flow: no training items");
  if (cfg.batch == 0) throw ConfigError("flow: batch must be positive");

  const LatentBank bank = encode_mean_latents(pair, data, data.train_items);
  const std::size_t M = data.tokens();
  const std::size_t L = net.latent_dim();
  AdamW opt(net.parameters(), cfg.optim);
  std::vector<std::size_t> batch(cfg.batch);
  std::vector<std::uint32_t> labels(cfg.batch);
  trace.reserve(cfg.iterations);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    {
      Rng::TagScope scope(rng, "batch");
      for (auto& b : batch) b = data.train_items[rng.uniform_index(data.train_items.size())];
    }
    std::vector<double> z0, z1;
    z0.reserve(cfg.batch * M * L);
    z1.reserve(cfg.batch * M * L);
    for (std::size_t n = 0; n < batch.size(); ++n) {
      labels[n] = data.labels[batch[n]];
      const auto a = bank.semantic[labels[n]].data();
      const auto s = bank.skeleton[batch[n]].data();
      z0.insert(z0.end(), a.begin(), a.end());
      z1.insert(z1.end(), s.begin(), s.end());
    }
    Tape tape;
    const FlowLoss l = conflow_loss(tape, net, Tensor(Shape{cfg.batch * M, L}, std::move(z0)),
                                    Tensor(Shape{cfg.batch * M, L}, std::move(z1)), labels, M, rng, cfg);
    if (!std::isfinite(l.value)) throw NumericError("flow: loss became non-finite at iteration " + std::to_string(it));
    tape.backward(l.total);
    opt.step();
    trace.push_back({it, l.value, l.positive, l.negative});
  }
  return trace;
}

}  // namespace flora

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "flora/adamw.hpp"
#include "flora/error.hpp"
#include "flora/nn.hpp"
#include "flora/ops.hpp"
#include "flora/rng.hpp"
#include "flora/tape.hpp"
#include "flora/tensor.hpp"

namespace flora {

enum class RegMode { kGeo, kKl, kNone };

inline const char* to_string(RegMode m) {
  switch (m) {
    case RegMode::kGeo: return "geo";
    case RegMode::kKl: return "kl";
    case RegMode::kNone: return "none";
  }
  return "?";
}

inline RegMode parse_reg_mode(const std::string& s) {
  if (s == "geo") return RegMode::kGeo;
  if (s == "kl") return RegMode::kKl;
  if (s == "none") return RegMode::kNone;
  throw ConfigError("unknown regularizer '" + s + "' (expected geo|kl|none)");
}

enum class EncodeMode { kSample, kMean };

inline constexpr double kLogvarLimit = 10.0;

/// [1 x d] -> [M x d], the row replicated M times.
inline Tensor expand_skeleton(const Tensor& row, std::size_t tokens) {
  if (tokens == 0) throw ShapeError("expand_skeleton: tokens must be >= 1");
  if (row.rank() != 2 || row.rows() != 1) throw ShapeError("expand_skeleton: expected a [1 x d] feature");
  std::vector<double> out;
  out.reserve(tokens * row.cols());
  for (std::size_t m = 0; m < tokens; ++m) out.insert(out.end(), row.data().begin(), row.data().end());
  return Tensor(Shape{tokens, row.cols()}, std::move(out));
}

/// Latent Gaussian parameters; logvar is clamped to [-10, 10].
struct LatentStats {
  Tensor mu;
  Tensor logvar;
};

/// Tape-level encoder outputs.
struct EncodedVars {
  Var mu;
  Var logvar;
  Var z;
};

/// Two-layer MLP encoder (input -> hidden -> [mu | logvar]) and two-layer MLP
/// decoder (latent -> hidden -> input), ReLU hidden activations.
class Vae {
 public:
  Vae() = default;
  Vae(std::size_t input_dim, std::size_t hidden, std::size_t latent_dim, Rng& rng)
      : input_dim_(input_dim),
        latent_dim_(latent_dim),
        enc1_(input_dim, hidden, rng),
        enc2_(hidden, 2 * latent_dim, rng),
        dec1_(latent_dim, hidden, rng),
        dec2_(hidden, input_dim, rng) {}

  std::size_t input_dim() const { return input_dim_; }
  std::size_t latent_dim() const { return latent_dim_; }

  EncodedVars encode(Tape& tape, Var x, Rng* rng, EncodeMode mode) {
    if (x.cols() != input_dim_) {
      throw ShapeError("vae encode: input width " + std::to_string(x.cols()) + " != " + std::to_string(input_dim_));
    }
    Var h = ops::relu(enc1_(tape, x));
    Var out = enc2_(tape, h);
    Var mu = ops::slice_cols(out, 0, latent_dim_);
    Var logvar = ops::clamp(ops::slice_cols(out, latent_dim_, 2 * latent_dim_), -kLogvarLimit, kLogvarLimit);
    if (mode == EncodeMode::kMean) return {mu, logvar, mu};
    if (rng == nullptr) throw NumericError("vae encode: sample mode requires an rng");
    Tensor eps;
    {
      Rng::TagScope scope(*rng, "reparam");
      eps = sample_standard_normal(*rng, mu.shape());
    }
    Var sigma = ops::exp(ops::scale(logvar, 0.5));
    Var z = ops::add(mu, ops::mul(sigma, tape.constant(std::move(eps))));
    return {mu, logvar, z};
  }

  Var decode(Tape& tape, Var z) {
    if (z.cols() != latent_dim_) throw ShapeError("vae decode: latent width mismatch");
    return dec2_(tape, ops::relu(dec1_(tape, z)));
  }

  void collect(const std::string& prefix, ParamList& out) {
    enc1_.collect(prefix + ".enc1", out);
    enc2_.collect(prefix + ".enc2", out);
    dec1_.collect(prefix + ".dec1", out);
    dec2_.collect(prefix + ".dec2", out);
  }

 private:
  std::size_t input_dim_ = 0;
  std::size_t latent_dim_ = 0;
  Linear enc1_, enc2_, dec1_, dec2_;
};

/// Skeleton and semantic VAEs sharing one latent width.
class VaePair {
 public:
  VaePair() = default;
  VaePair(std::size_t d_s, std::size_t d_a, std::size_t hidden, std::size_t latent_dim, Rng& rng) {
    Rng::TagScope scope(rng, "init");
    skeleton = Vae(d_s, hidden, latent_dim, rng);
    semantic = Vae(d_a, hidden, latent_dim, rng);
  }

  Vae skeleton;
  Vae semantic;

  std::size_t latent_dim() const { return skeleton.latent_dim(); }

  ParamList parameters() {
    ParamList out;
    skeleton.collect("skeleton", out);
    semantic.collect("semantic", out);
    return out;
  }

  /// Frozen pairs carry no gradients and are rejected by train_align.
  void freeze() {
    set_trainable(parameters(), false);
    frozen_ = true;
  }
  void unfreeze() {
    set_trainable(parameters(), true);
    frozen_ = false;
  }
  bool frozen() const { return frozen_; }

 private:
  bool frozen_ = false;
};

struct EncodeResult {
  LatentStats stats;
  Tensor z;
};

/// Tensor-level encode on a throwaway non-recording tape.
inline EncodeResult encode(Vae& vae, const Tensor& x, Rng* rng, EncodeMode mode) {
  Tape tape(false);
  const EncodedVars e = vae.encode(tape, tape.constant(x), rng, mode);
  return {{e.mu.value(), e.logvar.value()}, e.z.value()};
}

struct AlignLossConfig {
  RegMode reg = RegMode::kGeo;
  double lambda_align = 0.1;
  double beta = 0.1;
};

/// All alignment terms; `total` is the differentiable L_Align.
struct AlignLosses {
  Var total;
  double re = 0, re_ss = 0, re_aa = 0, re_sa = 0, re_as = 0;
  double geo = 0, kl = 0;
  double reg = 0;    // the active regularizer, unweighted
  double align = 0;  // re + weight * reg
};

/// Sum of the four reconstruction MSEs: s->s, a->a, s->a (skeleton latent
/// decoded as semantics), a->s.
struct ReconTerms {
  Var total;
  double ss, aa, sa, as;
};

inline ReconTerms reconstruction_loss(Var rec_ss, Var rec_aa, Var rec_sa, Var rec_as, Var x_s, Var x_a) {
  Var ss = ops::mse(rec_ss, x_s);
  Var aa = ops::mse(rec_aa, x_a);
  Var sa = ops::mse(rec_sa, x_a);
  Var as = ops::mse(rec_as, x_s);
  Var total = ops::add(ops::add(ss, aa), ops::add(sa, as));
  return {total, ss.item(), aa.item(), sa.item(), as.item()};
}

/// ||mu_s - mu_a||^2 + ||exp(lv_s) - exp(lv_a)||^2 over every token and latent
/// dimension, divided by the number of batch items.
inline Var geometric_consistency(Var mu_s, Var lv_s, Var mu_a, Var lv_a, std::size_t batch_items) {
  const double inv = 1.0 / static_cast<double>(batch_items);
  return ops::add(ops::sum_sq(ops::sub(mu_s, mu_a), inv), ops::sum_sq(ops::sub(ops::exp(lv_s), ops::exp(lv_a)), inv));
}

/// KL(N(mu, exp(lv)) || N(0, I)) summed over entries, divided by batch items.
inline Var kl_standard_normal(Var mu, Var lv, std::size_t batch_items) {
  const double inv = 1.0 / static_cast<double>(batch_items);
  Var t = ops::add(ops::sum_sq(mu), ops::sub(ops::sum(ops::exp(lv)), ops::sum(lv)));
  return ops::add_scalar(ops::scale(t, 0.5 * inv), -0.5 * inv * static_cast<double>(mu.value().size()));
}

/// Alignment objective on a batch of (expanded skeleton, semantic) pairs,
/// both given as [batch_items * M x d] row stacks.
inline AlignLosses alignment_losses(Tape& tape, VaePair& pair, const Tensor& x_s, const Tensor& x_a,
                                    std::size_t batch_items, Rng* rng, EncodeMode mode,
                                    const AlignLossConfig& cfg) {
  if (batch_items == 0 || x_s.rows() == 0) throw NumericError("alignment_losses: empty batch");
  if (x_s.rows() != x_a.rows()) throw ShapeError("alignment_losses: modality row counts differ");
  if (x_s.rows() % batch_items != 0) throw ShapeError("alignment_losses: rows not divisible by batch items");
  Var xs = tape.constant(x_s);
  Var xa = tape.constant(x_a);
  const EncodedVars es = pair.skeleton.encode(tape, xs, rng, mode);
  const EncodedVars ea = pair.semantic.encode(tape, xa, rng, mode);
  const ReconTerms rec = reconstruction_loss(pair.skeleton.decode(tape, es.z), pair.semantic.decode(tape, ea.z),
                                             pair.semantic.decode(tape, es.z), pair.skeleton.decode(tape, ea.z), xs, xa);
  AlignLosses out;
  out.re = rec.total.item();
  out.re_ss = rec.ss;
  out.re_aa = rec.aa;
  out.re_sa = rec.sa;
  out.re_as = rec.as;

  Var geo = geometric_consistency(es.mu, es.logvar, ea.mu, ea.logvar, batch_items);
  Var kl = ops::add(kl_standard_normal(es.mu, es.logvar, batch_items), kl_standard_normal(ea.mu, ea.logvar, batch_items));
  out.geo = geo.item();
  out.kl = kl.item();
  switch (cfg.reg) {
    case RegMode::kGeo:
      out.reg = out.geo;
      out.total = ops::add(rec.total, ops::scale(geo, cfg.lambda_align));
      out.align = out.total.item();
      break;
    case RegMode::kKl:
      out.reg = out.kl;
      out.total = ops::add(rec.total, ops::scale(kl, cfg.beta));
      out.align = out.total.item();
      break;
    case RegMode::kNone:
      out.reg = 0.0;
      out.total = rec.total;
      out.align = out.re;
      break;
  }
  return out;
}

struct AlignTrainConfig {
  AlignLossConfig loss;
  std::size_t iterations = 1000;
  std::size_t batch = 64;
  AdamWConfig optim{};
};

/// Training view of the data: skeleton rows, their labels, per-class
/// (attuned) semantic token matrices, and the indices allowed in training.
struct AlignData {
  Tensor skeleton;  // [n x d_s]
  std::vector<std::uint32_t> labels;
  std::vector<Tensor> semantics;  // per class [M x d_a]
  std::vector<std::size_t> train_items;

  std::size_t tokens() const { return semantics.empty() ? 0 : semantics.front().rows(); }
};

struct AlignTraceRow {
  std::size_t iter;
  double re;
  double reg;
  double align;
};

/// Stacks the expanded skeleton rows and the matching class semantics for
/// the given items.
inline std::pair<Tensor, Tensor> build_align_batch(const AlignData& data, std::span<const std::size_t> items) {
  const std::size_t M = data.tokens();
  const std::size_t ds = data.skeleton.cols();
  const std::size_t da = data.semantics.front().cols();
  std::vector<double> xs, xa;
  xs.reserve(items.size() * M * ds);
  xa.reserve(items.size() * M * da);
  for (std::size_t i : items) {
    const double* row = data.skeleton.data().data() + i * ds;
    for (std::size_t m = 0; m < M; ++m) xs.insert(xs.end(), row, row + ds);
    const auto sem = data.semantics[data.labels[i]].data();
    xa.insert(xa.end(), sem.begin(), sem.end());
  }
  return {Tensor(Shape{items.size() * M, ds}, std::move(xs)), Tensor(Shape{items.size() * M, da}, std::move(xa))};
}

inline void validate(const AlignData& d) {
  if (d.semantics.empty()) throw DataError("align: no semantic features");
  if (d.labels.size() != d.skeleton.rows()) throw DataError("align: label count does not match skeleton rows");
  for (const auto& s : d.semantics) check_same_shape(d.semantics.front(), s, "align semantics");
  for (std::size_t i : d.train_items) {
    if (i >= d.labels.size()) throw DataError("align: training index out of range");
    if (d.labels[i] >= d.semantics.size()) {
      throw DataError("align: class " + std::to_string(d.labels[i]) + " has no semantic feature");
    }
  }
}

/// Stage-1 training of the VAE pair on seen-class items; returns the
/// per-iteration loss trace.
inline std::vector<AlignTraceRow> train_align(VaePair& pair, const AlignData& data, const AlignTrainConfig& cfg,
                                              Rng& rng) {
  if (pair.frozen()) throw NumericError("train_align: VAE pair is frozen");
  validate(data);
  std::vector<AlignTraceRow> trace;
  if (cfg.iterations == 0) return trace;
  if (data.train_items.empty()) throw DataError("align: no training items");
  if (cfg.batch == 0) throw ConfigError("align: batch must be positive");
  trace.reserve(cfg.iterations);

  AdamW opt(pair.parameters(), cfg.optim);
  std::vector<std::size_t> batch(cfg.batch);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    {
      Rng::TagScope scope(rng, "batch");
      for (auto& b : batch) b = data.train_items[rng.uniform_index(data.train_items.size())];
    }
    const auto [xs, xa] = build_align_batch(data, batch);
    Tape tape;
    const AlignLosses l = alignment_losses(tape, pair, xs, xa, batch.size(), &rng, EncodeMode::kSample, cfg.loss);
    if (!std::isfinite(l.align)) throw NumericError("align: loss became non-finite at iteration " + std::to_string(it));
    tape.backward(l.total);
    opt.step();
    trace.push_back({it, l.re, l.reg, l.align});
  }
  return trace;
}

}  // namespace flora

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "flora/pipeline.hpp"
#include "flora/predict.hpp"
#include "flora/synthetic.hpp"

using namespace flora;

namespace {

FlowNet zero_field(std::size_t latent) {
  FlowNetConfig c;
  c.latent_dim = latent;
  c.width = 8;
  c.mlp_hidden = 8;
  c.embed_dim = 8;
  c.frequencies = 4;
  Rng rng(1);
  return FlowNet(c, rng);
}

Tensor s1(double v) { return Tensor::matrix(1, 1, {v}); }

double round1(double x) { return std::round(x * 10.0) / 10.0; }

// Trained reference models, shared by every test that needs them.
struct Reference {
  RunConfig cfg;
  Prepared prep;
  Models models;
};

Reference& reference() {
  static Reference* r = [] {
    auto* ref = new Reference;
    ref->prep = prepare(dataset_from_synthetic(generate_synthetic(ref->cfg.data.synthetic)), ref->cfg);
    ref->models = init_models(ref->prep, ref->cfg);
    train_models(ref->models, ref->prep, ref->cfg);
    return ref;
  }();
  return *r;
}

}  // namespace

TEST(VelocityError, ZeroFieldScalarCandidates) {
  FlowNet net = zero_field(1);
  const std::vector<Tensor> cands = {s1(0.5), s1(2.0)};
  const std::vector<Tensor> zs = {s1(1.0)};
  const auto eps = velocity_errors(net, zs, cands, PredictConfig{});
  EXPECT_NEAR(eps[0][0], 0.500005, 1e-14);
  EXPECT_NEAR(eps[0][1], 0.99998, 1e-14);
  const std::uint32_t ids[2] = {7, 9};
  EXPECT_EQ(zsl_predict(net, zs[0], cands, ids, PredictConfig{}), 7u);
}

TEST(VelocityError, ZeroFieldEqualsTargetVelocityNorm) {
  FlowNet net = zero_field(3);
  Rng rng(2);
  const Tensor zs = sample_standard_normal(rng, {2, 3}), za = sample_standard_normal(rng, {2, 3});
  double n = 0.0;
  for (std::size_t i = 0; i < zs.size(); ++i) {
    const double v = zs[i] - (1 - kDefaultSigmaMin) * za[i];
    n += v * v;
  }
  EXPECT_NEAR(velocity_error(net, zs, za, 0.3), std::sqrt(n), 1e-14);
  // Batched path agrees with the single-pair path.
  const std::vector<Tensor> one = {zs}, cand = {za};
  EXPECT_NEAR(velocity_errors(net, one, cand, PredictConfig{})[0][0], std::sqrt(n), 1e-14);
}

TEST(VelocityError, ExactVelocityGivesZero) {
  FlowNet net = zero_field(2);
  const Tensor za = Tensor::matrix(1, 2, {0.4, -1.2});
  Tensor zs = za;
  for (double& v : zs.mutable_data()) v *= 1 - kDefaultSigmaMin;
  EXPECT_NEAR(velocity_error(net, zs, za, 0.1), 0.0, 1e-15);
}

TEST(VelocityError, TimestepListAverages) {
  Rng rng(3);
  FlowNetConfig c;
  c.latent_dim = 2;
  c.width = 8;
  c.mlp_hidden = 8;
  c.embed_dim = 8;
  c.frequencies = 4;
  FlowNet net(c, rng);
  for (double& w : net.output_layer().weight.mutable_data()) w = rng.normal();
  const Tensor zs = sample_standard_normal(rng, {1, 2}), za = sample_standard_normal(rng, {1, 2});
  PredictConfig pc;
  pc.t_list = {0.1, 0.5, 0.9};
  const std::vector<Tensor> one = {zs}, cand = {za};
  const double avg =
      (velocity_error(net, zs, za, 0.1) + velocity_error(net, zs, za, 0.5) + velocity_error(net, zs, za, 0.9)) / 3;
  EXPECT_NEAR(velocity_errors(net, one, cand, pc)[0][0], avg, 1e-14);
}

TEST(Zsl, ArgminAndTieBreak) {
  const std::uint32_t ids[3] = {2, 5, 8};
  EXPECT_EQ(argmin_class(std::vector<double>{0.3, 0.1, 0.2}, ids), 5u);
  EXPECT_EQ(argmin_class(std::vector<double>{0.1, 0.1, 0.1}, ids), 2u);
  const std::uint32_t single[1] = {4};
  EXPECT_EQ(argmin_class(std::vector<double>{9.0}, single), 4u);
  EXPECT_THROW(argmin_class(std::vector<double>{}, std::span<const std::uint32_t>{}), NumericError);

  FlowNet net = zero_field(1);
  const std::vector<Tensor> dup = {s1(0.5), s1(0.5)};
  const std::uint32_t dup_ids[2] = {1, 3};
  EXPECT_EQ(zsl_predict(net, s1(1.0), dup, dup_ids, PredictConfig{}), 1u);
}

TEST(Zsl, ArgminInvariantUnderMonotoneTransform) {
  Rng rng(4);
  std::vector<std::uint32_t> ids(6);
  for (std::uint32_t i = 0; i < 6; ++i) ids[i] = 10 + i;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> eps(6), mapped(6);
    for (int i = 0; i < 6; ++i) {
      eps[i] = rng.uniform();
      mapped[i] = 3.0 * eps[i] * eps[i] + 1.0;
    }
    EXPECT_EQ(argmin_class(eps, ids), argmin_class(mapped, ids));
  }
}

TEST(Gzsl, ScalarExample) {
  FlowNet net = zero_field(1);
  const SplitSpec split = make_split(2, {1});
  const std::vector<Tensor> cands = {s1(0.5), s1(0.9)};
  const std::vector<Tensor> zs = {s1(1.0)};
  const auto eps = velocity_errors(net, zs, cands, PredictConfig{});
  EXPECT_NEAR(eps[0][0], 0.500005, 1e-14);
  EXPECT_NEAR(eps[0][1], 1.0 - 0.99999 * 0.9, 1e-14);  // 0.100009
  EXPECT_NEAR(eps[0][0] / eps[0][1], 5.0, 0.01);
  const std::uint32_t ids[2] = {0, 1};
  PredictConfig pc;
  pc.gamma = 0.75;
  EXPECT_EQ(gzsl_predict(net, zs[0], cands, ids, split, pc), 1u);
  pc.gamma = 6.0;
  EXPECT_EQ(gzsl_predict(net, zs[0], cands, ids, split, pc), 0u);
}

TEST(Gzsl, GammaExtremesOnRandomErrors) {
  const SplitSpec split = make_split(10, {1, 4, 7});
  std::vector<std::uint32_t> ids(10);
  for (std::uint32_t i = 0; i < 10; ++i) ids[i] = i;
  Rng rng(5);
  PredictConfig lo, hi;
  lo.gamma = 0.0;
  hi.gamma = 1e12;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> eps(10);
    for (double& e : eps) e = 1e-6 + 10.0 * rng.uniform();
    EXPECT_TRUE(split.is_unseen(gzsl_decide(eps, ids, split, lo)));
    EXPECT_TRUE(split.is_seen(gzsl_decide(eps, ids, split, hi)));
  }
}

TEST(Gzsl, DomainWinnerIsItsOwnArgmin) {
  const SplitSpec split = make_split(6, {0, 5});
  const std::vector<std::uint32_t> ids = {0, 1, 2, 3, 4, 5};
  PredictConfig pc;
  pc.gamma = 1.0;
  // seen best 0.2 (class 3), unseen best 0.4 (class 5): ratio 0.5 <= 1 -> seen.
  EXPECT_EQ(gzsl_decide(std::vector<double>{0.9, 0.5, 0.6, 0.2, 0.7, 0.4}, ids, split, pc), 3u);
  // seen best 0.8, unseen best 0.4: ratio 2 -> unseen.
  EXPECT_EQ(gzsl_decide(std::vector<double>{0.9, 0.8, 0.9, 0.85, 0.9, 0.4}, ids, split, pc), 5u);
  EXPECT_THROW(gzsl_decide(std::vector<double>{0.1, 0.2}, std::vector<std::uint32_t>{1, 2}, split, pc), DataError);
}

TEST(Metrics, HarmonicMean) {
  EXPECT_EQ(round1(100 * harmonic_mean(0.777, 0.756)), 76.6);
  EXPECT_EQ(round1(100 * harmonic_mean(0.669, 0.490)), 56.6);
  EXPECT_DOUBLE_EQ(harmonic_mean(0.42, 0.42), 0.42);
  EXPECT_EQ(harmonic_mean(0.8, 0.0), 0.0);
  EXPECT_EQ(harmonic_mean(0.0, 0.0), 0.0);
}

TEST(Metrics, EvaluateCounts) {
  const SplitSpec split = make_split(4, {2, 3});
  const std::vector<std::uint32_t> labels = {0, 0, 1, 2, 2, 3};
  const std::vector<std::uint32_t> pred = {0, 1, 1, 2, 3, 3};
  const EvalReport g = evaluate(pred, labels, split, Protocol::kGzsl);
  EXPECT_DOUBLE_EQ(g.seen, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(g.unseen, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(g.harmonic, 2.0 / 3.0);
  EXPECT_EQ(g.per_class.size(), 4u);
  const std::vector<std::uint32_t> ul = {2, 3, 3}, up = {2, 2, 3};
  EXPECT_DOUBLE_EQ(evaluate(up, ul, split, Protocol::kZsl).acc, 2.0 / 3.0);
  EXPECT_THROW(evaluate(pred, labels, split, Protocol::kZsl), DataError);
}

TEST(Similarity, Examples) {
  const Tensor q = Tensor::matrix(1, 2, {1, 1});
  const std::vector<Tensor> c = {Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 2, {1, 1})};
  EXPECT_EQ(baseline_similarity(q, c), 1u);
  EXPECT_NEAR(cosine_similarity(pool_tokens(q), pool_tokens(c[0])), 0.7071067811865475, 1e-15);
  const std::vector<Tensor> o = {Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 2, {0, 1})};
  EXPECT_EQ(baseline_similarity(Tensor::matrix(1, 2, {0, 1}), o), 1u);
  EXPECT_EQ(baseline_similarity(c[0], c), 0u);
  const std::vector<Tensor> z = {Tensor::matrix(1, 2, {0, 0})};
  EXPECT_THROW(baseline_similarity(q, z), NumericError);
  EXPECT_THROW(baseline_similarity(q, std::span<const Tensor>{}), NumericError);
}

TEST(Linear, SeparableSynthesisIsFitExactly) {
  // Near-zero variance makes every class's synthesized samples one tight cluster.
  Rng rng(6);
  VaePair pair(8, 6, 16, 4, rng);
  for (const auto& p : pair.parameters()) {
    if (p.name == "semantic.enc2.weight")
      for (std::size_t r = 0; r < p.tensor->rows(); ++r)
        for (std::size_t c = 4; c < 8; ++c) p.tensor->mutable_data()[r * 8 + c] = 0.0;
    if (p.name == "semantic.enc2.bias")
      for (std::size_t c = 4; c < 8; ++c) p.tensor->mutable_data()[c] = -10.0;
  }
  pair.freeze();
  std::vector<Tensor> sem;
  for (int c = 0; c < 4; ++c) sem.push_back(sample_standard_normal(rng, {2, 6}));
  Rng lr(7);
  PredictConfig pc;
  LinearBaseline lin(pair, sem, {3, 5, 6, 9}, lr, pc);
  EXPECT_EQ(lin.train_accuracy(), 1.0);
  EXPECT_THROW(
      [&] {
        PredictConfig bad;
        bad.n_synth = 0;
        Rng r(1);
        LinearBaseline(pair, sem, {3, 5, 6, 9}, r, bad);
      }(),
      ConfigError);
}

TEST(Linear, DeterministicInSeed) {
  Rng rng(8);
  VaePair pair(8, 6, 16, 4, rng);
  pair.freeze();
  std::vector<Tensor> sem;
  for (int c = 0; c < 3; ++c) sem.push_back(sample_standard_normal(rng, {2, 6}));
  const Tensor x = sample_standard_normal(rng, {20, 8});
  PredictConfig pc;
  pc.linear_iterations = 50;
  Rng a(9), b(9), c(10);
  LinearBaseline la(pair, sem, {0, 1, 2}, a, pc), lb(pair, sem, {0, 1, 2}, b, pc), lc(pair, sem, {0, 1, 2}, c, pc);
  EXPECT_EQ(la.final_loss(), lb.final_loss());
  EXPECT_EQ(la.predict_rows(x), lb.predict_rows(x));
  EXPECT_NE(la.final_loss(), lc.final_loss());
}

TEST(ReferenceBenchmark, LinearWithinTenPointsOfSimilarity) {
  Reference& r = reference();
  const double sim = evaluate_run(r.models, r.prep, r.cfg, Protocol::kZsl, "similarity").acc;
  const double lin = evaluate_run(r.models, r.prep, r.cfg, Protocol::kZsl, "linear").acc;
  EXPECT_NEAR(100 * lin, 100 * sim, 10.0) << "linear " << 100 * lin << "% similarity " << 100 * sim << "%";
}

TEST(ReferenceBenchmark, GzslGateExtremes) {
  Reference& r = reference();
  const ErrorTable t = flow_errors(r.models, r.prep, Protocol::kGzsl, r.cfg.predict);
  for (const auto& row : t.eps)
    for (double e : row) ASSERT_GT(e, 0.0);
  PredictConfig lo = r.cfg.predict, hi = r.cfg.predict;
  lo.gamma = 0.0;
  hi.gamma = 1e12;
  for (std::uint32_t y : decide(t, r.prep, Protocol::kGzsl, lo).predicted) EXPECT_TRUE(r.prep.split.is_unseen(y));
  for (std::uint32_t y : decide(t, r.prep, Protocol::kGzsl, hi).predicted) EXPECT_TRUE(r.prep.split.is_seen(y));
}

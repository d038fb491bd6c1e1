#pragma once

// End-to-end run orchestration shared by the CLI and the acceptance suite:
// load packs, attune semantics, hold out seen test items, train both stages,
// evaluate with any classifier.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "flora/align.hpp"
#include "flora/attune.hpp"
#include "flora/checkpoint.hpp"
#include "flora/config.hpp"
#include "flora/error.hpp"
#include "flora/flow.hpp"
#include "flora/fpack.hpp"
#include "flora/predict.hpp"
#include "flora/split.hpp"

namespace flora {

struct Dataset {
  FeaturePack skeleton;
  FeaturePack semantic;
  SplitSpec split;
};

inline void check_consistent(const Dataset& d) {
  if (d.skeleton.kind != PackKind::kSkeleton) throw DataError("skeleton pack has kind 'semantic'");
  if (d.semantic.kind != PackKind::kSemantic) throw DataError("semantic pack has kind 'skeleton'");
  if (d.skeleton.tokens != 1) throw DataError("skeleton pack must have one token per item");
  if (d.split.n_classes != d.semantic.n_items) {
    throw DataError("split declares " + std::to_string(d.split.n_classes) + " classes but the semantic pack has " +
                    std::to_string(d.semantic.n_items));
  }
  validate(d.skeleton, d.split.n_classes);
}

inline Dataset load_dataset(const std::filesystem::path& skeleton, const std::filesystem::path& semantic,
                            const std::filesystem::path& split) {
  Dataset d{read_fpack(skeleton), read_fpack(semantic), load_split(split)};
  check_consistent(d);
  return d;
}

inline Dataset dataset_from_synthetic(const SyntheticData& s) { return {s.skeleton, s.semantic, s.split}; }

/// Model-ready view of a dataset.
struct Prepared {
  AlignData data;  // train_items = seen classes minus the held-out part
  SplitSpec split;
  std::vector<std::size_t> test_seen;
  std::vector<std::size_t> test_unseen;
};

inline Prepared prepare(const Dataset& d, const RunConfig& cfg) {
  check_consistent(d);
  Prepared p;
  p.split = d.split;

  std::vector<Tensor> raw;
  raw.reserve(d.semantic.n_items);
  const std::size_t tokens = cfg.attune.tokens == 0 ? d.semantic.tokens : cfg.attune.tokens;
  if (tokens > d.semantic.tokens) throw ConfigError("attune.tokens exceeds the semantic pack's token count");
  for (std::uint32_t c = 0; c < d.semantic.n_items; ++c) {
    const auto f = d.semantic.item(c);
    raw.emplace_back(Shape{tokens, d.semantic.dim}, std::vector<double>(f.begin(), f.begin() + tokens * d.semantic.dim));
  }
  p.data.semantics = attune_all(raw, cfg.attune.k, cfg.attune.tau);

  p.data.skeleton = Tensor(Shape{d.skeleton.n_items, d.skeleton.dim},
                           std::vector<double>(d.skeleton.features.begin(), d.skeleton.features.end()));
  p.data.labels = d.skeleton.labels;

  std::map<std::uint32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < d.skeleton.n_items; ++i) by_class[d.skeleton.labels[i]].push_back(i);
  for (const auto& [c, items] : by_class) {
    if (d.split.is_unseen(c)) {
      p.test_unseen.insert(p.test_unseen.end(), items.begin(), items.end());
    } else if (d.split.is_seen(c)) {
      // The last ceil(f * n) items of each seen class form the seen test set;
      // at least one item stays in training.
      std::size_t held = static_cast<std::size_t>(std::ceil(cfg.data.seen_test_fraction * items.size()));
      held = std::min(held, items.size() - 1);
      p.data.train_items.insert(p.data.train_items.end(), items.begin(), items.end() - held);
      p.test_seen.insert(p.test_seen.end(), items.end() - held, items.end());
    }
  }
  std::sort(p.data.train_items.begin(), p.data.train_items.end());
  std::sort(p.test_seen.begin(), p.test_seen.end());
  std::sort(p.test_unseen.begin(), p.test_unseen.end());
  return p;
}

struct Models {
  VaePair pair;
  FlowNet net;
};

inline Models init_models(const Prepared& p, const RunConfig& cfg) {
  Rng root(cfg.seed);
  Rng align_init = root.substream("align.init");
  Rng flow_init = root.substream("flow.init");
  Models m;
  m.pair = VaePair(p.data.skeleton.cols(), p.data.semantics.front().cols(), cfg.hidden, cfg.latent_dim, align_init);
  FlowNetConfig fc = cfg.flow_net;
  fc.latent_dim = cfg.latent_dim;
  m.net = FlowNet(fc, flow_init);
  return m;
}

struct TrainResult {
  std::vector<AlignTraceRow> align_trace;
  std::vector<FlowTraceRow> flow_trace;
};

/// Stage 1 then stage 2. `flow_log`, when given, receives the stage-2 Rng
/// call log.
inline TrainResult train_models(Models& m, const Prepared& p, const RunConfig& cfg, RngLog* flow_log = nullptr) {
  Rng root(cfg.seed);
  TrainResult r;
  Rng align_rng = root.substream("align.train");
  r.align_trace = train_align(m.pair, p.data, cfg.align, align_rng);
  m.pair.freeze();
  Rng flow_rng = root.substream("flow.train");
  flow_rng.attach_log(flow_log);
  FlowTrainConfig fc = cfg.flow;
  r.flow_trace = train_flow(m.net, m.pair, p.data, fc, flow_rng);
  return r;
}

inline void save_models(Models& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_checkpoint(m.pair.parameters(), dir / "align.ckpt");
  save_checkpoint(m.net.parameters(), dir / "flow.ckpt");
}

inline void load_models(Models& m, const std::filesystem::path& dir) {
  load_checkpoint(m.pair.parameters(), dir / "align.ckpt");
  load_checkpoint(m.net.parameters(), dir / "flow.ckpt");
  m.pair.freeze();
}

/// Predictions and labels over the protocol's test items.
struct Predictions {
  std::vector<std::size_t> items;
  std::vector<std::uint32_t> predicted;
  std::vector<std::uint32_t> labels;
};

inline std::vector<std::uint32_t> candidate_ids(const SplitSpec& s, Protocol protocol) {
  if (protocol == Protocol::kZsl) return s.unseen;
  std::vector<std::uint32_t> ids = s.seen;
  ids.insert(ids.end(), s.unseen.begin(), s.unseen.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::vector<std::size_t> test_items(const Prepared& p, Protocol protocol) {
  if (protocol == Protocol::kZsl) return p.test_unseen;
  std::vector<std::size_t> items = p.test_seen;
  items.insert(items.end(), p.test_unseen.begin(), p.test_unseen.end());
  std::sort(items.begin(), items.end());
  return items;
}

/// Velocity errors of every test item against every candidate class.
struct ErrorTable {
  std::vector<std::size_t> items;
  std::vector<std::uint32_t> ids;
  std::vector<std::vector<double>> eps;
};

inline ErrorTable flow_errors(Models& m, const Prepared& p, Protocol protocol, const PredictConfig& pc) {
  ErrorTable t;
  t.items = test_items(p, protocol);
  t.ids = candidate_ids(p.split, protocol);
  if (t.items.empty()) throw DataError(std::string("no test items for protocol ") + to_string(protocol));
  if (t.ids.empty()) throw DataError(std::string("no candidate classes for protocol ") + to_string(protocol));
  const LatentBank bank = encode_mean_latents(m.pair, p.data, t.items);
  std::vector<Tensor> zs, za;
  for (std::size_t i : t.items) zs.push_back(bank.skeleton[i]);
  for (std::uint32_t c : t.ids) za.push_back(bank.semantic[c]);
  t.eps = velocity_errors(m.net, zs, za, pc);
  return t;
}

inline Predictions decide(const ErrorTable& t, const Prepared& p, Protocol protocol, const PredictConfig& pc) {
  Predictions out;
  out.items = t.items;
  for (std::size_t n = 0; n < t.items.size(); ++n) {
    out.labels.push_back(p.data.labels[t.items[n]]);
    out.predicted.push_back(protocol == Protocol::kZsl ? argmin_class(t.eps[n], t.ids)
                                                       : gzsl_decide(t.eps[n], t.ids, p.split, pc));
  }
  return out;
}

inline Predictions predict_with(Models& m, const Prepared& p, const RunConfig& cfg, Protocol protocol,
                                const std::string& classifier) {
  if (classifier == "flow") return decide(flow_errors(m, p, protocol, cfg.predict), p, protocol, cfg.predict);

  Predictions out;
  out.items = test_items(p, protocol);
  const auto ids = candidate_ids(p.split, protocol);
  if (out.items.empty() || ids.empty()) throw DataError(std::string("nothing to evaluate for ") + to_string(protocol));
  for (std::size_t i : out.items) out.labels.push_back(p.data.labels[i]);

  if (classifier == "similarity") {
    const LatentBank bank = encode_mean_latents(m.pair, p.data, out.items);
    std::vector<Tensor> za;
    for (std::uint32_t c : ids) za.push_back(bank.semantic[c]);
    for (std::size_t i : out.items) out.predicted.push_back(ids[baseline_similarity(bank.skeleton[i], za)]);
    return out;
  }
  if (classifier == "linear") {
    std::vector<Tensor> sem;
    for (std::uint32_t c : ids) sem.push_back(p.data.semantics[c]);
    Rng rng = Rng(cfg.seed).substream("baseline.linear");
    LinearBaseline lin(m.pair, sem, ids, rng, cfg.predict);
    std::vector<Tensor> rows;
    for (std::size_t i : out.items) rows.push_back(p.data.skeleton.row(i));
    out.predicted = lin.predict_rows(vstack(rows));
    return out;
  }
  throw ConfigError("unknown classifier '" + classifier + "'");
}

inline EvalReport evaluate_run(Models& m, const Prepared& p, const RunConfig& cfg, Protocol protocol,
                               const std::string& classifier) {
  const Predictions pr = predict_with(m, p, cfg, protocol, classifier);
  EvalReport r = evaluate(pr.predicted, pr.labels, p.split, protocol);
  r.classifier = classifier;
  r.seed = cfg.seed;
  RunConfig echo = cfg;
  echo.eval.protocol = to_string(protocol);
  echo.eval.classifier = classifier;
  r.config = to_json(echo);
  return r;
}

/// Smoothed start/end of a loss series: means of the first and last `window`
/// entries.
inline std::pair<double, double> smoothed_endpoints(const std::vector<double>& v, std::size_t window) {
  if (v.empty()) return {0.0, 0.0};
  window = std::min(window, v.size());
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < window; ++i) {
    a += v[i];
    b += v[v.size() - 1 - i];
  }
  return {a / static_cast<double>(window), b / static_cast<double>(window)};
}

}  // namespace flora

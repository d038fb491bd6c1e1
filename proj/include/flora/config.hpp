#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flora/align.hpp"
#include "flora/error.hpp"
#include "flora/flow.hpp"
#include "flora/predict.hpp"
#include "flora/synthetic.hpp"

namespace flora {

struct PathsConfig {
  std::string skeleton = "data/skeleton.fpack";
  std::string semantic = "data/semantic.fpack";
  std::string split = "data/split.json";
  std::string checkpoint_dir = "run/checkpoints";
  std::string report_dir = "run/reports";
};

struct DataConfig {
  SyntheticConfig synthetic;
  /// Fraction of every seen class held out as the seen test set.
  double seen_test_fraction = 0.2;
};

struct AttuneConfig {
  std::size_t k = 5;
  double tau = 0.5;
  std::string pooling = "mean";
  /// Use only the first `tokens` semantic tokens; 0 keeps all.
  std::size_t tokens = 0;
};

struct EvalConfig {
  std::string protocol = "zsl";
  std::string classifier = "flow";
};

/// Every tunable of a run; defaults reproduce the reference setup.
struct RunConfig {
  PathsConfig paths;
  DataConfig data;
  AttuneConfig attune;
  AlignTrainConfig align;
  std::size_t hidden = 256;
  std::size_t latent_dim = 64;
  FlowNetConfig flow_net;
  FlowTrainConfig flow;
  PredictConfig predict;
  EvalConfig eval;
  std::uint64_t seed = 7;
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["paths"] = {{"skeleton", c.paths.skeleton},
                {"semantic", c.paths.semantic},
                {"split", c.paths.split},
                {"checkpoint_dir", c.paths.checkpoint_dir},
                {"report_dir", c.paths.report_dir}};
  const auto& s = c.data.synthetic;
  j["data"] = {{"n_classes", s.n_classes},
               {"n_unseen", s.n_unseen},
               {"samples_per_class", s.samples_per_class},
               {"d_s", s.d_s},
               {"d_a", s.d_a},
               {"tokens", s.tokens},
               {"cluster_spread", s.cluster_spread},
               {"coupling", s.coupling},
               {"semantic_rank", s.semantic_rank},
               {"token_noise", s.token_noise},
               {"seen_test_fraction", c.data.seen_test_fraction}};
  j["attune"] = {{"k", c.attune.k}, {"tau", c.attune.tau}, {"pooling", c.attune.pooling}, {"tokens", c.attune.tokens}};
  j["align"] = {{"latent_dim", c.latent_dim},
                {"hidden", c.hidden},
                {"lambda_align", c.align.loss.lambda_align},
                {"beta", c.align.loss.beta},
                {"reg_mode", to_string(c.align.loss.reg)},
                {"iterations", c.align.iterations},
                {"batch", c.align.batch},
                {"lr", c.align.optim.lr},
                {"weight_decay", c.align.optim.weight_decay}};
  j["flow"] = {{"lambda_flow", c.flow.lambda_flow},
               {"iterations", c.flow.iterations},
               {"batch", c.flow.batch},
               {"timestep_sampler", to_string(c.flow.sampler)},
               {"backbone", to_string(c.flow_net.backbone)},
               {"sigma_min", c.flow.sigma_min},
               {"width", c.flow_net.width},
               {"mlp_hidden", c.flow_net.mlp_hidden},
               {"embed_dim", c.flow_net.embed_dim},
               {"frequencies", c.flow_net.frequencies},
               {"token_attention", c.flow_net.token_attention},
               {"lr", c.flow.optim.lr},
               {"weight_decay", c.flow.optim.weight_decay}};
  j["predict"] = {{"t", c.predict.t},
                  {"gamma", c.predict.gamma},
                  {"alpha", c.predict.alpha},
                  {"t_list", c.predict.t_list},
                  {"n_synth", c.predict.n_synth},
                  {"linear_iterations", c.predict.linear_iterations},
                  {"linear_lr", c.predict.linear_lr}};
  j["eval"] = {{"protocol", c.eval.protocol}, {"classifier", c.eval.classifier}};
  j["seed"] = c.seed;
  return j;
}

namespace detail {

// Reads `key` from section `sec` into `out` when present; unknown keys are
// tracked by the caller.
template <typename T>
void read_key(const nlohmann::json& sec, const char* key, T& out, std::set<std::string>& used) {
  used.insert(key);
  if (!sec.contains(key)) return;
  try {
    out = sec.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& sec, const std::string& name, const std::set<std::string>& used) {
  for (const auto& [k, v] : sec.items()) {
    if (!used.count(k)) throw ConfigError("unknown config key '" + name + "." + k + "'");
  }
}

inline const nlohmann::json& section(const nlohmann::json& j, const char* name) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!j.contains(name)) return empty;
  if (!j.at(name).is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
  return j.at(name);
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  validate(c.data.synthetic);
  if (!(c.data.seen_test_fraction >= 0.0 && c.data.seen_test_fraction < 1.0)) {
    throw ConfigError("data.seen_test_fraction must lie in [0,1)");
  }
  if (c.attune.pooling != "mean") throw ConfigError("attune.pooling: only 'mean' is supported");
  if (!(c.attune.tau >= 0.0)) throw ConfigError("attune.tau must be >= 0");
  if (c.latent_dim == 0 || c.hidden == 0) throw ConfigError("align: latent_dim and hidden must be positive");
  if (!(c.align.loss.lambda_align >= 0.0) || !(c.align.loss.beta >= 0.0)) {
    throw ConfigError("align: lambda_align and beta must be >= 0");
  }
  if (c.align.batch == 0 || c.flow.batch == 0) throw ConfigError("batch sizes must be positive");
  if (!(c.align.optim.lr > 0.0) || !(c.flow.optim.lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (c.flow_net.width == 0 || c.flow_net.mlp_hidden == 0 || c.flow_net.embed_dim == 0 || c.flow_net.frequencies == 0) {
    throw ConfigError("flow: network widths must be positive");
  }
  validate(c.flow);
  validate(c.predict);
  parse_protocol(c.eval.protocol);
  if (c.eval.classifier != "flow" && c.eval.classifier != "similarity" && c.eval.classifier != "linear") {
    throw ConfigError("eval.classifier must be flow|similarity|linear");
  }
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  std::set<std::string> top;
  for (const char* s : {"paths", "data", "attune", "align", "flow", "predict", "eval", "seed"}) top.insert(s);
  detail::reject_unknown(j, "", top);

  {
    const auto& s = detail::section(j, "paths");
    std::set<std::string> used;
    detail::read_key(s, "skeleton", c.paths.skeleton, used);
    detail::read_key(s, "semantic", c.paths.semantic, used);
    detail::read_key(s, "split", c.paths.split, used);
    detail::read_key(s, "checkpoint_dir", c.paths.checkpoint_dir, used);
    detail::read_key(s, "report_dir", c.paths.report_dir, used);
    detail::reject_unknown(s, "paths", used);
  }
  {
    const auto& s = detail::section(j, "data");
    std::set<std::string> used;
    auto& d = c.data.synthetic;
    detail::read_key(s, "n_classes", d.n_classes, used);
    detail::read_key(s, "n_unseen", d.n_unseen, used);
    detail::read_key(s, "samples_per_class", d.samples_per_class, used);
    detail::read_key(s, "d_s", d.d_s, used);
    detail::read_key(s, "d_a", d.d_a, used);
    detail::read_key(s, "tokens", d.tokens, used);
    detail::read_key(s, "cluster_spread", d.cluster_spread, used);
    detail::read_key(s, "coupling", d.coupling, used);
    detail::read_key(s, "semantic_rank", d.semantic_rank, used);
    detail::read_key(s, "token_noise", d.token_noise, used);
    detail::read_key(s, "seen_test_fraction", c.data.seen_test_fraction, used);
    detail::reject_unknown(s, "data", used);
  }
  {
    const auto& s = detail::section(j, "attune");
    std::set<std::string> used;
    detail::read_key(s, "k", c.attune.k, used);
    detail::read_key(s, "tau", c.attune.tau, used);
    detail::read_key(s, "pooling", c.attune.pooling, used);
    detail::read_key(s, "tokens", c.attune.tokens, used);
    detail::reject_unknown(s, "attune", used);
  }
  {
    const auto& s = detail::section(j, "align");
    std::set<std::string> used;
    std::string reg = to_string(c.align.loss.reg);
    detail::read_key(s, "latent_dim", c.latent_dim, used);
    detail::read_key(s, "hidden", c.hidden, used);
    detail::read_key(s, "lambda_align", c.align.loss.lambda_align, used);
    detail::read_key(s, "beta", c.align.loss.beta, used);
    detail::read_key(s, "reg_mode", reg, used);
    detail::read_key(s, "iterations", c.align.iterations, used);
    detail::read_key(s, "batch", c.align.batch, used);
    detail::read_key(s, "lr", c.align.optim.lr, used);
    detail::read_key(s, "weight_decay", c.align.optim.weight_decay, used);
    detail::reject_unknown(s, "align", used);
    c.align.loss.reg = parse_reg_mode(reg);
  }
  {
    const auto& s = detail::section(j, "flow");
    std::set<std::string> used;
    std::string sampler = to_string(c.flow.sampler);
    std::string backbone = to_string(c.flow_net.backbone);
    detail::read_key(s, "lambda_flow", c.flow.lambda_flow, used);
    detail::read_key(s, "iterations", c.flow.iterations, used);
    detail::read_key(s, "batch", c.flow.batch, used);
    detail::read_key(s, "timestep_sampler", sampler, used);
    detail::read_key(s, "backbone", backbone, used);
    detail::read_key(s, "sigma_min", c.flow.sigma_min, used);
    detail::read_key(s, "width", c.flow_net.width, used);
    detail::read_key(s, "mlp_hidden", c.flow_net.mlp_hidden, used);
    detail::read_key(s, "embed_dim", c.flow_net.embed_dim, used);
    detail::read_key(s, "frequencies", c.flow_net.frequencies, used);
    detail::read_key(s, "token_attention", c.flow_net.token_attention, used);
    detail::read_key(s, "lr", c.flow.optim.lr, used);
    detail::read_key(s, "weight_decay", c.flow.optim.weight_decay, used);
    detail::reject_unknown(s, "flow", used);
    c.flow.sampler = parse_sampler(sampler);
    c.flow_net.backbone = parse_backbone(backbone);
  }
  {
    const auto& s = detail::section(j, "predict");
    std::set<std::string> used;
    detail::read_key(s, "t", c.predict.t, used);
    detail::read_key(s, "gamma", c.predict.gamma, used);
    detail::read_key(s, "alpha", c.predict.alpha, used);
    detail::read_key(s, "t_list", c.predict.t_list, used);
    detail::read_key(s, "n_synth", c.predict.n_synth, used);
    detail::read_key(s, "linear_iterations", c.predict.linear_iterations, used);
    detail::read_key(s, "linear_lr", c.predict.linear_lr, used);
    detail::reject_unknown(s, "predict", used);
  }
  {
    const auto& s = detail::section(j, "eval");
    std::set<std::string> used;
    detail::read_key(s, "protocol", c.eval.protocol, used);
    detail::read_key(s, "classifier", c.eval.classifier, used);
    detail::reject_unknown(s, "eval", used);
  }
  if (j.contains("seed")) {
    try {
      c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config key 'seed': ") + e.what());
    }
  }
  c.data.synthetic.seed = c.seed;
  c.predict.sigma_min = c.flow.sigma_min;
  c.flow_net.latent_dim = c.latent_dim;
  validate(c);
  return c;
}

/// Applies `section.key=value` to a config document. The value is parsed as
/// JSON when possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    start = dot + 1;
  }
}

inline nlohmann::json load_config_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

}  // namespace flora

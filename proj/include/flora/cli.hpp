#pragma once

// The `flora` command-line front end. Kept in a header so the test suites can
// drive commands in-process; tools/flora.cpp only forwards argv.

#include <CLI11/CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flora/checkpoint.hpp"
#include "flora/config.hpp"
#include "flora/error.hpp"
#include "flora/fpack.hpp"
#include "flora/pipeline.hpp"
#include "flora/synthetic.hpp"

namespace flora::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// A parsed config plus the directory its relative paths resolve against.
struct Loaded {
  RunConfig cfg;
  fs::path base;

  fs::path path(const std::string& p) const {
    const fs::path q(p);
    return (q.is_absolute() ? q : base / q).lexically_normal();
  }
  fs::path skeleton() const { return path(cfg.paths.skeleton); }
  fs::path semantic() const { return path(cfg.paths.semantic); }
  fs::path split() const { return path(cfg.paths.split); }
  fs::path checkpoints() const { return path(cfg.paths.checkpoint_dir); }
  fs::path reports() const { return path(cfg.paths.report_dir); }
};

inline Loaded load(const std::string& config_path, const std::vector<std::string>& overrides) {
  nlohmann::json doc = load_config_document(config_path);
  for (const auto& o : overrides) apply_override(doc, o);
  if (const char* env = std::getenv("FLORA_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      const unsigned long long seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      doc["seed"] = seed;
    } catch (const std::exception&) {
      throw ConfigError(std::string("FLORA_SEED is not an unsigned integer: ") + env);
    }
  }
  Loaded l{config_from_json(doc), fs::absolute(config_path).parent_path()};
  return l;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline Dataset load_inputs(const Loaded& l) {
  for (const fs::path& p : {l.skeleton(), l.semantic(), l.split()}) {
    if (!fs::exists(p)) throw DataError("missing input file " + p.string());
  }
  return load_dataset(l.skeleton(), l.semantic(), l.split());
}

inline int cmd_gen(const Loaded& l, std::ostream& out) {
  const SyntheticData s = generate_synthetic(l.cfg.data.synthetic);
  for (const fs::path& p : {l.skeleton(), l.semantic(), l.split()}) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  }
  write_fpack(s.skeleton, l.skeleton());
  write_fpack(s.semantic, l.semantic());
  save_split(s.split, l.split());

  nlohmann::ordered_json manifest;
  manifest["skeleton"] = l.cfg.paths.skeleton;
  manifest["semantic"] = l.cfg.paths.semantic;
  manifest["split"] = l.cfg.paths.split;
  manifest["class_names"] = s.semantic.class_names;
  const auto echo = to_json(l.cfg);
  manifest["data"] = echo["data"];
  manifest["seed"] = echo["seed"];
  write_text(l.skeleton().parent_path() / "manifest.json", manifest.dump(2) + "\n");

  out << "wrote " << l.skeleton().string() << " (" << s.skeleton.n_items << " items, d=" << s.skeleton.dim << ")\n";
  out << "wrote " << l.semantic().string() << " (" << s.semantic.n_items << " classes, M=" << s.semantic.tokens
      << ", d=" << s.semantic.dim << ")\n";
  out << "wrote " << l.split().string() << " (" << s.split.seen.size() << " seen / " << s.split.unseen.size()
      << " unseen)\n";
  out << "nearest-centroid accuracy: " << std::fixed << std::setprecision(1)
      << 100.0 * nearest_centroid_accuracy(s.skeleton) << "%\n";
  out.unsetf(std::ios::fixed);
  return kOk;
}

inline std::string align_trace_csv(const std::vector<AlignTraceRow>& rows) {
  std::string s = "iter,L_Re,L_reg,L_Align\n";
  for (const auto& r : rows) {
    s += std::to_string(r.iter) + "," + format_double(r.re) + "," + format_double(r.reg) + "," +
         format_double(r.align) + "\n";
  }
  return s;
}

inline std::string flow_trace_csv(const std::vector<FlowTraceRow>& rows) {
  std::string s = "iter,L_Flow,positive,negative\n";
  for (const auto& r : rows) {
    s += std::to_string(r.iter) + "," + format_double(r.loss) + "," + format_double(r.positive) + "," +
         format_double(r.negative) + "\n";
  }
  return s;
}

inline int cmd_train(const Loaded& l, std::ostream& out) {
  const Prepared p = prepare(load_inputs(l), l.cfg);
  Models m = init_models(p, l.cfg);
  const TrainResult tr = train_models(m, p, l.cfg);
  save_models(m, l.checkpoints());
  write_text(l.checkpoints() / "align_trace.csv", align_trace_csv(tr.align_trace));
  write_text(l.checkpoints() / "flow_trace.csv", flow_trace_csv(tr.flow_trace));
  out << "stage 1: " << tr.align_trace.size() << " iterations";
  if (!tr.align_trace.empty()) {
    out << ", L_Align " << tr.align_trace.front().align << " -> " << tr.align_trace.back().align;
  }
  out << "\nstage 2: " << tr.flow_trace.size() << " iterations";
  if (!tr.flow_trace.empty()) out << ", L_Flow " << tr.flow_trace.front().loss << " -> " << tr.flow_trace.back().loss;
  out << "\ncheckpoints in " << l.checkpoints().string() << "\n";
  return kOk;
}

inline Models load_trained(const Loaded& l, const Prepared& p) {
  Models m = init_models(p, l.cfg);
  for (const char* f : {"align.ckpt", "flow.ckpt"}) {
    if (!fs::exists(l.checkpoints() / f)) {
      throw DataError("missing checkpoint " + (l.checkpoints() / f).string() + " (run `flora train` first)");
    }
  }
  load_models(m, l.checkpoints());
  return m;
}

inline int cmd_eval(const Loaded& l, std::ostream& out) {
  const Protocol protocol = parse_protocol(l.cfg.eval.protocol);
  const Prepared p = prepare(load_inputs(l), l.cfg);
  Models m = load_trained(l, p);
  const EvalReport r = evaluate_run(m, p, l.cfg, protocol, l.cfg.eval.classifier);
  const std::string stem = "report_" + l.cfg.eval.protocol + "_" + l.cfg.eval.classifier;
  write_text(l.reports() / (stem + ".json"), report_to_json(r).dump(2) + "\n");
  const std::string table = report_table(r);
  write_text(l.reports() / (stem + ".txt"), table);
  out << table;
  return kOk;
}

inline const std::map<std::string, std::string>& axis_aliases() {
  static const std::map<std::string, std::string> m = {
      {"t", "t"},
      {"k", "k"},
      {"tau", "tau"},
      {"τ", "tau"},
      {"gamma", "gamma"},
      {"γ", "gamma"},
      {"lambda_align", "lambda_align"},
      {"λ_Align", "lambda_align"},
      {"lambda_flow", "lambda_flow"},
      {"λ_Flow", "lambda_flow"},
      {"tokens", "tokens"},
  };
  return m;
}

inline std::string canonical_axis(const std::string& axis) {
  const auto it = axis_aliases().find(axis);
  if (it == axis_aliases().end()) {
    throw ConfigError("unknown sweep axis '" + axis + "' (expected t|k|tau|gamma|lambda_align|lambda_flow|tokens)");
  }
  return it->second;
}

/// Config key that a sweep axis overrides.
inline std::string axis_key(const std::string& axis) {
  static const std::map<std::string, std::string> keys = {
      {"t", "predict.t"},         {"k", "attune.k"},
      {"tau", "attune.tau"},      {"gamma", "predict.gamma"},
      {"lambda_align", "align.lambda_align"}, {"lambda_flow", "flow.lambda_flow"},
      {"tokens", "attune.tokens"},
  };
  return keys.at(axis);
}

struct SweepRow {
  std::string value;
  double zsl_acc;
  double gzsl_s;
  double gzsl_u;
  double gzsl_h;
};

/// Only t and gamma leave training untouched; every other axis retrains.
inline bool axis_needs_training(const std::string& axis) { return axis != "t" && axis != "gamma"; }

inline std::vector<SweepRow> run_sweep(const nlohmann::json& base_doc, const std::string& axis,
                                       const std::vector<std::string>& values, const Dataset& data) {
  const std::string canon = canonical_axis(axis);
  if (values.empty()) throw ConfigError("sweep: no values given");
  std::vector<SweepRow> rows;
  std::optional<Models> shared;
  std::optional<Prepared> shared_prep;
  for (const auto& v : values) {
    nlohmann::json doc = base_doc;
    apply_override(doc, axis_key(canon) + "=" + v);
    const RunConfig cfg = config_from_json(doc);
    SweepRow row{v, 0, 0, 0, 0};
    auto score = [&](Models& m, const Prepared& p) {
      row.zsl_acc = evaluate_run(m, p, cfg, Protocol::kZsl, cfg.eval.classifier).acc;
      const EvalReport g = evaluate_run(m, p, cfg, Protocol::kGzsl, cfg.eval.classifier);
      row.gzsl_s = g.seen;
      row.gzsl_u = g.unseen;
      row.gzsl_h = g.harmonic;
    };
    if (axis_needs_training(canon)) {
      const Prepared p = prepare(data, cfg);
      Models m = init_models(p, cfg);
      train_models(m, p, cfg);
      score(m, p);
    } else {
      if (!shared) {
        shared_prep = prepare(data, cfg);
        shared = init_models(*shared_prep, cfg);
        train_models(*shared, *shared_prep, cfg);
      }
      score(*shared, *shared_prep);
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string sweep_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
  std::string s = "axis,value,zsl_acc,gzsl_S,gzsl_U,gzsl_H\n";
  for (const auto& r : rows) {
    s += axis + "," + r.value + "," + format_double(r.zsl_acc) + "," + format_double(r.gzsl_s) + "," +
         format_double(r.gzsl_u) + "," + format_double(r.gzsl_h) + "\n";
  }
  return s;
}

inline std::vector<std::string> split_values(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    if (a == std::string::npos) throw ConfigError("sweep: empty value in list '" + list + "'");
    out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

inline std::string describe_pack(const FeaturePack& p) {
  std::ostringstream os;
  os << "FPACK v" << kFpackVersion << "\n"
     << "kind:    " << to_string(p.kind) << "\n"
     << "n_items: " << p.n_items << "\n"
     << "M:       " << p.tokens << "\n"
     << "d:       " << p.dim << "\n";
  if (!p.labels.empty()) {
    const auto [lo, hi] = std::minmax_element(p.labels.begin(), p.labels.end());
    os << "labels:  " << *lo << ".." << *hi << "\n";
  }
  return os.str();
}

inline std::string describe_checkpoint(const std::vector<CheckpointBlock>& blocks) {
  std::ostringstream os;
  std::size_t total = 0;
  os << "FLORACKP v" << kCheckpointVersion << ", " << blocks.size() << " blocks\n";
  for (const auto& b : blocks) {
    os << "  " << b.name << " " << shape_str(b.tensor.shape()) << "\n";
    total += b.tensor.size();
  }
  os << "parameters: " << total << "\n";
  return os.str();
}

/// Mean-mode skeleton latents of every test item (seen holdout and unseen), one
/// token of width latent_dim per item, labels preserved.
inline FeaturePack export_latents(Models& m, const Prepared& p) {
  const auto items = test_items(p, Protocol::kGzsl);
  const LatentBank bank = encode_mean_latents(m.pair, p.data, items);
  FeaturePack out;
  out.kind = PackKind::kSkeleton;
  out.n_items = static_cast<std::uint32_t>(items.size());
  out.tokens = 1;
  out.dim = static_cast<std::uint32_t>(m.pair.latent_dim());
  for (std::size_t i : items) {
    const Tensor row = bank.skeleton[i].row(0);
    for (double v : row.data()) out.features.push_back(static_cast<float>(v));
    out.labels.push_back(p.data.labels[i]);
  }
  validate(out);
  return out;
}

inline int cmd_inspect(const fs::path& file, const std::optional<Loaded>& l, const std::string& export_path,
                       std::ostream& out) {
  const auto bytes = detail::read_file_bytes(file);
  const std::string_view head(reinterpret_cast<const char*>(bytes.data()), std::min<std::size_t>(bytes.size(), 8));
  if (head == kFpackMagic) {
    out << describe_pack(decode_fpack(bytes));
  } else if (head == kCheckpointMagic) {
    out << describe_checkpoint(decode_checkpoint(bytes));
  } else {
    throw FpackError(FpackErrc::kBadMagic, file.string() + ": not an FPACK or FLORACKP file");
  }
  if (!export_path.empty()) {
    if (!l) throw ConfigError("--export-latents needs --config");
    const Prepared p = prepare(load_inputs(*l), l->cfg);
    Models m = load_trained(*l, p);
    const FeaturePack lat = export_latents(m, p);
    const fs::path dst = l->path(export_path);
    if (dst.has_parent_path()) fs::create_directories(dst.parent_path());
    write_fpack(lat, dst);
    out << "exported " << lat.n_items << " latents to " << dst.string() << "\n";
  }
  return kOk;
}

/// Parses argv and runs one command. Errors are reported on `err` and mapped
/// to exit codes: usage/config 1, data 2, numeric 3.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"flora: zero-shot skeleton action recognition"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", config_path, "JSON run config");
    if (config_required) opt->required();
    sub->add_option("--set", overrides, "override a config key, e.g. --set flow.iterations=50");
  };

  auto* gen = app.add_subcommand("gen", "write the synthetic benchmark packs and split");
  add_common(gen, true);
  auto* train = app.add_subcommand("train", "run both training stages and write checkpoints");
  add_common(train, true);
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints and write a report");
  add_common(eval, true);
  std::string protocol, classifier;
  eval->add_option("--protocol", protocol, "zsl|gzsl");
  eval->add_option("--classifier", classifier, "flow|similarity|linear");
  auto* sweep = app.add_subcommand("sweep", "retrain/re-evaluate over one axis and write a CSV");
  add_common(sweep, true);
  std::string axis, values;
  sweep->add_option("--axis", axis, "t|k|tau|gamma|lambda_align|lambda_flow|tokens")->required();
  sweep->add_option("--values", values, "comma-separated values")->required();
  auto* inspect = app.add_subcommand("inspect", "print pack or checkpoint headers");
  add_common(inspect, false);
  std::string file, export_path;
  inspect->add_option("file", file, "FPACK or FLORACKP file")->required();
  inspect->add_option("--export-latents", export_path, "write mean-mode test latents as FPACK");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "flora: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (inspect->parsed()) {
      std::optional<Loaded> l;
      if (!config_path.empty()) l = load(config_path, overrides);
      return cmd_inspect(file, l, export_path, out);
    }
    if (!protocol.empty()) overrides.push_back("eval.protocol=\"" + protocol + "\"");
    if (!classifier.empty()) overrides.push_back("eval.classifier=\"" + classifier + "\"");
    const Loaded l = load(config_path, overrides);
    if (gen->parsed()) return cmd_gen(l, out);
    if (train->parsed()) return cmd_train(l, out);
    if (eval->parsed()) return cmd_eval(l, out);
    if (sweep->parsed()) {
      nlohmann::json doc = load_config_document(config_path);
      for (const auto& o : overrides) apply_override(doc, o);
      doc["seed"] = l.cfg.seed;
      const std::string canon = canonical_axis(axis);
      const auto rows = run_sweep(doc, canon, split_values(values), load_inputs(l));
      const std::string csv = sweep_csv(canon, rows);
      write_text(l.reports() / ("sweep_" + canon + ".csv"), csv);
      out << csv;
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "flora: config error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    err << "flora: data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    err << "flora: numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const fs::filesystem_error& e) {
    err << "flora: data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace flora::cli

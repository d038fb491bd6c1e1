#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "flora/cli.hpp"

using namespace flora;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result flora_cmd(std::vector<std::string> args) {
  args.insert(args.begin(), "flora");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<unsigned char> bytes(const fs::path& p) { return detail::read_file_bytes(p); }

// A scratch run directory with a small, fast config.
class CliRun : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("flora_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    nlohmann::json cfg = {
        {"paths",
         {{"skeleton", "data/skeleton.fpack"},
          {"semantic", "data/semantic.fpack"},
          {"split", "data/split.json"},
          {"checkpoint_dir", "ckpt"},
          {"report_dir", "reports"}}},
        {"data", {{"n_classes", 8}, {"n_unseen", 3}, {"samples_per_class", 12}, {"d_s", 16}, {"d_a", 12}}},
        {"attune", {{"k", 2}}},
        {"align", {{"latent_dim", 8}, {"hidden", 32}, {"iterations", 40}, {"batch", 16}, {"lr", 1e-3}}},
        {"flow",
         {{"iterations", 20}, {"batch", 16}, {"width", 16}, {"mlp_hidden", 32}, {"embed_dim", 16}, {"frequencies", 8}}},
        {"predict", {{"linear_iterations", 20}, {"n_synth", 5}}},
        {"seed", 3}};
    std::ofstream(config()) << cfg.dump(2);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string config() const { return (dir_ / "run.json").string(); }
  fs::path at(const std::string& rel) const { return dir_ / rel; }

  void gen_and_train() {
    ASSERT_EQ(flora_cmd({"gen", "--config", config()}).code, 0);
    ASSERT_EQ(flora_cmd({"train", "--config", config()}).code, 0);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliRun, GenWritesReadableDeterministicFiles) {
  const Result r = flora_cmd({"gen", "--config", config()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("nearest-centroid accuracy: "), std::string::npos);
  const auto skel = bytes(at("data/skeleton.fpack"));
  const auto sem = bytes(at("data/semantic.fpack"));
  const auto split = bytes(at("data/split.json"));
  const auto manifest = bytes(at("data/manifest.json"));

  const Dataset d = load_dataset(at("data/skeleton.fpack"), at("data/semantic.fpack"), at("data/split.json"));
  EXPECT_EQ(d.skeleton.n_items, 8u * 12u);
  EXPECT_EQ(d.semantic.n_items, 8u);
  EXPECT_EQ(d.split.unseen.size(), 3u);

  ASSERT_EQ(flora_cmd({"gen", "--config", config()}).code, 0);
  EXPECT_EQ(bytes(at("data/skeleton.fpack")), skel);
  EXPECT_EQ(bytes(at("data/semantic.fpack")), sem);
  EXPECT_EQ(bytes(at("data/split.json")), split);
  EXPECT_EQ(bytes(at("data/manifest.json")), manifest);
}

TEST_F(CliRun, TrainIsReproducibleAndEvalWritesReports) {
  gen_and_train();
  const auto a1 = bytes(at("ckpt/align.ckpt"));
  const auto f1 = bytes(at("ckpt/flow.ckpt"));
  const auto trace = bytes(at("ckpt/align_trace.csv"));
  ASSERT_EQ(flora_cmd({"train", "--config", config()}).code, 0);
  EXPECT_EQ(bytes(at("ckpt/align.ckpt")), a1);
  EXPECT_EQ(bytes(at("ckpt/flow.ckpt")), f1);
  EXPECT_EQ(bytes(at("ckpt/align_trace.csv")), trace);

  for (const char* proto : {"zsl", "gzsl"}) {
    for (const char* cls : {"flow", "similarity", "linear"}) {
      const Result r = flora_cmd({"eval", "--config", config(), "--protocol", proto, "--classifier", cls});
      ASSERT_EQ(r.code, 0) << r.err;
      const fs::path json = at(std::string("reports/report_") + proto + "_" + cls + ".json");
      const auto first = bytes(json);
      ASSERT_EQ(flora_cmd({"eval", "--config", config(), "--protocol", proto, "--classifier", cls}).code, 0);
      EXPECT_EQ(bytes(json), first) << json;
      const auto doc = nlohmann::json::parse(std::string(first.begin(), first.end()));
      EXPECT_EQ(doc["classifier"], cls);
      EXPECT_EQ(doc["protocol"], proto);
    }
  }
}

TEST_F(CliRun, MissingSplitIsDataError) {
  ASSERT_EQ(flora_cmd({"gen", "--config", config()}).code, 0);
  fs::remove(at("data/split.json"));
  const Result r = flora_cmd({"train", "--config", config()});
  EXPECT_EQ(r.code, cli::kData);
  EXPECT_NE(r.err.find("split.json"), std::string::npos) << r.err;
}

TEST_F(CliRun, EvalWithoutCheckpointsIsDataError) {
  ASSERT_EQ(flora_cmd({"gen", "--config", config()}).code, 0);
  EXPECT_EQ(flora_cmd({"eval", "--config", config()}).code, cli::kData);
}

TEST_F(CliRun, UsageErrors) {
  EXPECT_EQ(flora_cmd({}).code, cli::kUsage);
  EXPECT_EQ(flora_cmd({"frobnicate"}).code, cli::kUsage);
  EXPECT_EQ(flora_cmd({"gen"}).code, cli::kUsage);
  EXPECT_EQ(flora_cmd({"gen", "--config", config(), "--set", "align.nonsense=1"}).code, cli::kUsage);
  EXPECT_EQ(flora_cmd({"gen", "--config", config(), "--set", "noequals"}).code, cli::kUsage);
  EXPECT_EQ(flora_cmd({"gen", "--config", (dir_ / "nope.json").string()}).code, cli::kUsage);
}

TEST_F(CliRun, InspectPackAndCheckpoint) {
  gen_and_train();
  const Result p = flora_cmd({"inspect", at("data/semantic.fpack").string()});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.out.find("n_items: 8\n"), std::string::npos) << p.out;
  EXPECT_NE(p.out.find("M:       4\n"), std::string::npos) << p.out;
  EXPECT_NE(p.out.find("d:       12\n"), std::string::npos) << p.out;
  const Result c = flora_cmd({"inspect", at("ckpt/flow.ckpt").string()});
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_NE(c.out.find("FLORACKP v1"), std::string::npos);
}

TEST_F(CliRun, InspectCorruptedFileFails) {
  ASSERT_EQ(flora_cmd({"gen", "--config", config()}).code, 0);
  auto b = bytes(at("data/skeleton.fpack"));
  b[3] ^= 0xFF;
  detail::write_file_bytes(at("bad.fpack"), b);
  EXPECT_NE(flora_cmd({"inspect", at("bad.fpack").string()}).code, 0);
  b = bytes(at("data/skeleton.fpack"));
  b.pop_back();
  detail::write_file_bytes(at("short.fpack"), b);
  EXPECT_NE(flora_cmd({"inspect", at("short.fpack").string()}).code, 0);
  EXPECT_NE(flora_cmd({"inspect", at("missing.fpack").string()}).code, 0);
}

TEST_F(CliRun, ExportedLatentsReloadAsFpack) {
  gen_and_train();
  const Result r = flora_cmd({"inspect", at("ckpt/align.ckpt").string(), "--config", config(), "--export-latents",
                              "latents.fpack"});
  ASSERT_EQ(r.code, 0) << r.err;
  const FeaturePack lat = read_fpack(at("latents.fpack"));
  EXPECT_EQ(lat.kind, PackKind::kSkeleton);
  EXPECT_EQ(lat.tokens, 1u);
  EXPECT_EQ(lat.dim, 8u);
  // 3 unseen classes in full plus ceil(0.2 * 12) = 3 held-out items of each of 5 seen classes.
  EXPECT_EQ(lat.n_items, 3u * 12u + 5u * 3u);
  EXPECT_EQ(encode_fpack(decode_fpack(bytes(at("latents.fpack")))), bytes(at("latents.fpack")));
}

TEST_F(CliRun, SweepTimestepRowCount) {
  ASSERT_EQ(flora_cmd({"gen", "--config", config()}).code, 0);
  const Result r =
      flora_cmd({"sweep", "--config", config(), "--axis", "t", "--values", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(at("reports/sweep_t.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 10u);
  EXPECT_EQ(lines[0], "axis,value,zsl_acc,gzsl_S,gzsl_U,gzsl_H");
  EXPECT_EQ(lines[1].rfind("t,0.1,", 0), 0u);
}

TEST_F(CliRun, SweepKZeroMatchesNoAttunementRun) {
  ASSERT_EQ(flora_cmd({"gen", "--config", config()}).code, 0);
  const cli::Loaded l = cli::load(config(), {});
  const Dataset data = cli::load_inputs(l);
  const auto rows = cli::run_sweep(load_config_document(config()), "k", {"0"}, data);
  ASSERT_EQ(rows.size(), 1u);

  nlohmann::json doc = load_config_document(config());
  doc["attune"]["k"] = 0;
  const RunConfig cfg = config_from_json(doc);
  const Prepared p = prepare(data, cfg);
  Models m = init_models(p, cfg);
  train_models(m, p, cfg);
  EXPECT_EQ(rows[0].zsl_acc, evaluate_run(m, p, cfg, Protocol::kZsl, "flow").acc);
  const EvalReport g = evaluate_run(m, p, cfg, Protocol::kGzsl, "flow");
  EXPECT_EQ(rows[0].gzsl_s, g.seen);
  EXPECT_EQ(rows[0].gzsl_u, g.unseen);
}

TEST_F(CliRun, SweepGammaEndpointsAreDomainExtremes) {
  ASSERT_EQ(flora_cmd({"gen", "--config", config()}).code, 0);
  const cli::Loaded l = cli::load(config(), {});
  const auto rows = cli::run_sweep(load_config_document(config()), "gamma", {"0", "1e12"}, cli::load_inputs(l));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].gzsl_s, 0.0);
  EXPECT_EQ(rows[1].gzsl_u, 0.0);
}

TEST(CliAxis, Aliases) {
  EXPECT_EQ(cli::canonical_axis("t"), "t");
  EXPECT_EQ(cli::canonical_axis("gamma"), "gamma");
  EXPECT_EQ(cli::axis_key("k"), "attune.k");
  EXPECT_THROW(cli::canonical_axis("bogus"), ConfigError);
}

TEST(Checkpoint, RoundtripAndDamage) {
  Rng rng(1);
  VaePair a(5, 4, 6, 3, rng), b(5, 4, 6, 3, rng);
  const fs::path path = fs::temp_directory_path() / ("flora_ckpt_" + std::to_string(::getpid()) + ".ckpt");
  save_checkpoint(a.parameters(), path);
  load_checkpoint(b.parameters(), path);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i].tensor, *pb[i].tensor) << pa[i].name;

  const auto good = bytes(path);
  EXPECT_THROW(decode_checkpoint(std::span(good.data(), good.size() - 1)), DataError);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), DataError);
  auto magic = good;
  magic[0] ^= 0xFF;
  EXPECT_THROW(decode_checkpoint(magic), DataError);
  auto version = good;
  version[8] ^= 0xFF;
  EXPECT_THROW(decode_checkpoint(version), DataError);

  VaePair wrong(5, 4, 7, 3, rng);
  EXPECT_THROW(load_checkpoint(wrong.parameters(), path), DataError);
  fs::remove(path);
}

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "vidvisc/io_util.hpp"
#include "vidvisc/pipeline.hpp"

using namespace vidvisc;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Small enough to run every stage in a few seconds.
json tiny_overrides() {
  return {{"frames", 20},         {"render_height", 32},      {"render_width", 48},
          {"videos_per_level", 3}, {"test_videos_per_level", 1}, {"clip_height", 16},
          {"clip_width", 24},     {"latent_dim", 16},         {"ae_epochs", 1},
          {"ae_batch", 16},       {"ae_micro_batch", 8},      {"ae_clips_per_epoch", 16},
          {"head_epochs", 1},     {"head_batch", 16},         {"head_micro_batch", 8},
          {"head_clips_per_epoch", 16}, {"head_hidden", {8, 4}}, {"levels", 3},
          {"logistic_max_epochs", 20}, {"continuity_pairs", 50}};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("vidvisc_pipe_" + name);
  fs::remove_all(d);
  return d;
}

struct CliResult {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

CliResult run_cli(const std::string& args) {
  const fs::path o = fs::temp_directory_path() / "vidvisc_cli_stdout", e = fs::temp_directory_path() / "vidvisc_cli_stderr";
  const std::string cmd = std::string(VIDVISC_CLI) + " " + args + " >" + o.string() + " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
}

}  // namespace

TEST(RunConfig, DefaultsValidate) {
  const RunConfig cfg = RunConfig::from_json(json::object());
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.i("latent_dim"), 512);
  EXPECT_EQ(cfg.encoder_config().flat_size(), 3072);
  EXPECT_EQ(cfg.values().at("classes").size(), 5u);
}

TEST(RunConfig, TypedOverrides) {
  RunConfig cfg = RunConfig::from_json(json::object());
  cfg.set("latent_dim", "256");
  cfg.set("ae_lr_classification", "1e-3");
  cfg.set("augment", "false");
  cfg.set("task", "regression");
  cfg.set("head_hidden", "[32,8]");
  EXPECT_EQ(cfg.i("latent_dim"), 256);
  EXPECT_DOUBLE_EQ(cfg.d("ae_lr_classification"), 1e-3);
  EXPECT_FALSE(cfg.b("augment"));
  EXPECT_EQ(cfg.regressor_config().hidden, (std::vector<int64_t>{32, 8}));
  EXPECT_THROW(cfg.set("latent_dim", "12x"), ConfigError);
  EXPECT_THROW(cfg.set("augment", "yes"), ConfigError);
  EXPECT_THROW(cfg.set("no_such_key", "1"), ConfigError);
}

TEST(RunConfig, ValidationNamesTheProblem) {
  RunConfig cfg = RunConfig::from_json({{"frames", 10}});
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("frames"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::from_json({{"reg_mode", "thawed"}}).validate(), ConfigError);
}

TEST(RunConfig, ProfilesLayerOverDefaults) {
  const fs::path p = fresh_dir("profile.json");
  write_text_atomic(p, R"({"defaults": {"seed": 3}, "fast": {"ae_epochs": 2}})");
  const RunConfig fast = RunConfig::from_file(p, "fast");
  EXPECT_EQ(fast.i("seed"), 3);
  EXPECT_EQ(fast.i("ae_epochs"), 2);
  EXPECT_EQ(RunConfig::from_file(p, "defaults").i("ae_epochs"), 300);
  EXPECT_THROW(RunConfig::from_file(p, "missing"), ConfigError);
  EXPECT_THROW(RunConfig::from_file(fresh_dir("nope.json"), "defaults"), ConfigError);
}

TEST(RunConfig, FingerprintTracksValues) {
  RunConfig a = RunConfig::from_json(json::object()), b = a;
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  b.set("seed", "8");
  EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(Pipeline, GenCountsPerTask) {
  const fs::path out = fresh_dir("gen");
  RunConfig cls = RunConfig::from_json(tiny_overrides());
  run_stage("gen", cls, out / "cls");
  EXPECT_EQ(read_manifest(layout::raw_manifest(out / "cls")).entries.size(), 15u);
  RunConfig reg = RunConfig::from_json(tiny_overrides());
  reg.set("task", "regression");
  reg.set("levels", "8");
  reg.set("videos_per_level", "10");
  reg.set("test_videos_per_level", "2");
  run_stage("gen", reg, out / "reg");
  const Manifest m = read_manifest(layout::raw_manifest(out / "reg"));
  EXPECT_EQ(m.entries.size(), 80u);
  EXPECT_EQ(m.split("test").size(), 16u);
  EXPECT_EQ(m.kind(), LabelKind::viscosity_cP);
}

TEST(Pipeline, MissingInputsAreReported) {
  const fs::path out = fresh_dir("missing");
  const RunConfig cfg = RunConfig::from_json(tiny_overrides());
  EXPECT_THROW(run_stage("prepare", cfg, out), MissingInput);
  EXPECT_THROW(run_stage("eval", cfg, out), MissingInput);
}

TEST(Pipeline, ClassificationEndToEndAndSkip) {
  const fs::path out = fresh_dir("cls");
  const RunConfig cfg = RunConfig::from_json(tiny_overrides());
  const auto first = run_pipeline(cfg, out);
  ASSERT_EQ(first.size(), 6u);
  for (const auto& r : first) EXPECT_FALSE(r.skipped) << r.stage;
  const json metrics = json::parse(slurp(out / "metrics.json"));
  EXPECT_EQ(metrics.at("task"), "classification");
  EXPECT_EQ(metrics.at("test_videos"), 5);
  EXPECT_EQ(metrics.at("confusion_matrix").size(), 5u);
  EXPECT_TRUE(fs::exists(out / "pca_summary.json"));
  EXPECT_TRUE(fs::exists(out / "pretrain_history.csv"));
  EXPECT_FALSE(fs::is_empty(out / "trajectories"));

  const auto ckpt_before = read_file(layout::autoencoder(out));
  const auto second = run_pipeline(cfg, out);
  for (const auto& r : second) EXPECT_TRUE(r.skipped) << r.stage;
  EXPECT_EQ(read_file(layout::autoencoder(out)), ckpt_before);

  // A missing output reruns the stage, and the result is bitwise identical.
  fs::remove(layout::autoencoder(out));
  EXPECT_FALSE(run_stage("pretrain", cfg, out).skipped);
  EXPECT_EQ(read_file(layout::autoencoder(out)), ckpt_before);
}

TEST(Pipeline, RegressionModesWriteSeparateOutputs) {
  const fs::path out = fresh_dir("reg");
  RunConfig cfg = RunConfig::from_json(tiny_overrides());
  cfg.set("task", "regression");
  for (const char* s : {"gen", "prepare", "pretrain"}) run_stage(s, cfg, out);
  for (const char* mode : {"frozen", "scratch"}) {
    cfg.set("reg_mode", mode);
    run_stage("train-reg", cfg, out);
    const auto r = run_stage("eval", cfg, out);
    EXPECT_TRUE(r.summary.contains("mae_cP")) << mode;
    EXPECT_TRUE(fs::exists(out / (std::string("metrics_") + mode + ".json")));
    EXPECT_TRUE(fs::exists(out / (std::string("plot_") + mode + ".csv")));
  }
  // The other mode's stages are still current.
  cfg.set("reg_mode", "frozen");
  EXPECT_TRUE(run_stage("eval", cfg, out).skipped);
}

TEST(Pipeline, LockIsExclusive) {
  const fs::path out = fresh_dir("lock");
  {
    DirectoryLock a(out);
    EXPECT_TRUE(fs::exists(out / ".vidvisc.lock"));
    EXPECT_THROW(DirectoryLock b(out), std::runtime_error);
  }
  EXPECT_FALSE(fs::exists(out / ".vidvisc.lock"));
  EXPECT_NO_THROW(DirectoryLock c(out));
}

TEST(Cli, ErrorsAreSingleJsonLines) {
  const fs::path out = fresh_dir("cli");
  auto r = run_cli("eval --out " + out.string());
  EXPECT_EQ(r.code, 1);
  ASSERT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
  json err = json::parse(r.err);
  EXPECT_EQ(err.at("error"), "missing_input");
  EXPECT_EQ(err.at("stage"), "eval");
  EXPECT_EQ(err.at("exit_code"), 1);

  r = run_cli("gen --out " + out.string() + " --latent-dim banana");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err).at("error"), "validation");

  r = run_cli("fly");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err).at("error"), "usage");

  r = run_cli("train-reg --out " + out.string() + " --mode thawed");
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, RunsAStageAndSkipsOnRepeat) {
  const fs::path out = fresh_dir("cli_gen");
  std::string args = "gen --quiet --out " + out.string();
  const json overrides = tiny_overrides();
  for (const auto& [k, v] : overrides.items()) {
    std::string flag = k;
    std::replace(flag.begin(), flag.end(), '_', '-');
    args += " --" + flag + "='" + v.dump() + "'";
  }
  auto r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(json::parse(r.out).at("skipped").get<bool>());
  r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(json::parse(r.out).at("skipped").get<bool>());
  EXPECT_FALSE(fs::exists(out / ".vidvisc.lock"));
}

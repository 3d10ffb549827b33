// vidvisc: command-line driver for the mask-video viscosity pipeline.
//
//   vidvisc <stage> [--config FILE] [--profile NAME] [--out DIR] [--<key> VALUE ...]
//
// Any config key can be overridden as --key or --key-with-dashes.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>

#include "vidvisc/io_util.hpp"
#include "vidvisc/pipeline.hpp"

namespace {

int fail(int code, const std::string& kind, const std::string& stage, const std::string& message) {
  const nlohmann::json err = {{"error", kind}, {"stage", stage}, {"message", message}, {"exit_code", code}};
  std::cerr << err.dump() << std::endl;
  return code;
}

std::string key_of(std::string flag) {
  while (!flag.empty() && flag.front() == '-') flag.erase(flag.begin());
  for (auto& ch : flag) {
    if (ch == '-') ch = '_';
  }
  return flag;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask-video autoencoder pipeline: gen, prepare, pretrain, train-cls, train-reg, eval, pca"};
  app.require_subcommand(1);
  std::string config_path, profile = "defaults", out_dir = "out", mode;
  bool quiet = false;
  for (const auto& stage : vidvisc::stage_names()) {
    auto* sub = app.add_subcommand(stage, "run the " + stage + " stage");
    sub->allow_extras();
    sub->add_option("--config", config_path, "JSON config with profiles");
    sub->add_option("--profile", profile, "profile inside the config (defaults, desk, ...)");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_flag("--quiet", quiet, "suppress progress messages");
    if (stage == "train-reg" || stage == "eval") sub->add_option("--mode", mode, "frozen, unfrozen or scratch");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(1, "usage", "", e.what());
  }
  const std::string stage = app.get_subcommands().front()->get_name();

  try {
    vidvisc::RunConfig cfg = config_path.empty() ? vidvisc::RunConfig::from_json(nlohmann::json::object())
                                                 : vidvisc::RunConfig::from_file(config_path, profile);
    if (config_path.empty() && profile != "defaults") {
      throw vidvisc::ConfigError("--profile " + profile + " needs --config");
    }
    const auto extras = app.get_subcommands().front()->remaining();
    for (size_t i = 0; i < extras.size(); ++i) {
      const std::string& flag = extras[i];
      if (flag.rfind("--", 0) != 0) throw vidvisc::ConfigError("unexpected argument '" + flag + "'");
      const auto eq = flag.find('=');
      if (eq != std::string::npos) {
        cfg.set(key_of(flag.substr(0, eq)), flag.substr(eq + 1));
      } else {
        if (i + 1 >= extras.size()) throw vidvisc::ConfigError("option " + flag + " needs a value");
        cfg.set(key_of(flag), extras[++i]);
      }
    }
    if (!mode.empty()) cfg.set("reg_mode", mode);
    cfg.validate();

    vidvisc::DirectoryLock lock(out_dir);
    auto log = [quiet](const std::string& msg) {
      if (!quiet) std::fprintf(stderr, "[vidvisc] %s\n", msg.c_str());
    };
    const auto res = vidvisc::run_stage(stage, cfg, out_dir, log);
    std::cout << nlohmann::json{{"stage", res.stage}, {"skipped", res.skipped}, {"summary", res.summary}}.dump()
              << std::endl;
    return 0;
  } catch (const vidvisc::ConfigError& e) {
    return fail(1, "validation", stage, e.what());
  } catch (const vidvisc::MissingInput& e) {
    return fail(1, "missing_input", stage, e.what());
  } catch (const vidvisc::CheckpointMismatch& e) {
    return fail(1, "checkpoint_mismatch", stage, e.what());
  } catch (const std::exception& e) {
    return fail(2, "runtime", stage, e.what());
  }
}

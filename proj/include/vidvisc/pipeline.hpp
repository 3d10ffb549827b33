#pragma once

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidvisc/autoencoder.hpp"
#include "vidvisc/heads.hpp"
#include "vidvisc/slosh.hpp"

namespace vidvisc {

// Invalid configuration or command line; maps to exit code 1.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A stage input (file, checkpoint, earlier stage) is missing; exit code 1.
class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat key/value run configuration. Every key has a default that mirrors the
// paper; a profile is a set of overrides on top of those defaults.
class RunConfig {
 public:
  static nlohmann::json defaults();
  // Config file: {"defaults": {...}, "<profile>": {...}}. "defaults" is
  // merged over the built-in defaults, then the chosen profile over that.
  static RunConfig from_file(const std::filesystem::path& path, const std::string& profile);
  static RunConfig from_json(const nlohmann::json& overrides);

  // Sets `key` from a command-line string, parsed per the key's type.
  void set(const std::string& key, const std::string& value);
  void set_json(const std::string& key, const nlohmann::json& value);
  void validate() const;

  const nlohmann::json& values() const { return values_; }
  std::string task() const { return values_.at("task").get<std::string>(); }
  int64_t i(const std::string& key) const { return values_.at(key).get<int64_t>(); }
  double d(const std::string& key) const { return values_.at(key).get<double>(); }
  std::string s(const std::string& key) const { return values_.at(key).get<std::string>(); }
  bool b(const std::string& key) const { return values_.at(key).get<bool>(); }

  // Fingerprint of everything that influences stage outputs.
  std::string fingerprint() const;

  EncoderConfig encoder_config() const;
  GenerateSpec generate_spec() const;
  PretrainConfig pretrain_config() const;
  RegressorConfig regressor_config() const;
  LogisticConfig logistic_config() const;

 private:
  nlohmann::json values_;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen", "prepare", "pretrain", "train-cls", "train-reg", "eval", "pca"};
  return names;
}

struct StageResult {
  std::string stage;
  bool skipped = false;
  double wall_seconds = 0;
  nlohmann::json summary;  // stage specific, e.g. metrics for eval
};

using LogFn = std::function<void(const std::string&)>;

// Runs one stage into `out_dir`. A stage whose manifest records the same
// config fingerprint and input hashes, and whose outputs exist, is skipped.
StageResult run_stage(const std::string& stage, const RunConfig& cfg, const std::filesystem::path& out_dir,
                      const LogFn& log = {});

// gen -> prepare -> pretrain -> train-cls | train-reg -> eval -> pca.
std::vector<StageResult> run_pipeline(const RunConfig& cfg, const std::filesystem::path& out_dir,
                                      const LogFn& log = {});

// Exclusive writer lock on an output directory, released on destruction.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Paths of stage artifacts inside an output directory.
namespace layout {
std::filesystem::path raw_manifest(const std::filesystem::path& out);
std::filesystem::path prepared_manifest(const std::filesystem::path& out);
std::filesystem::path autoencoder(const std::filesystem::path& out);
std::filesystem::path logistic(const std::filesystem::path& out);
std::filesystem::path regressor(const std::filesystem::path& out, RegMode mode);
std::filesystem::path metrics(const std::filesystem::path& out, const RunConfig& cfg);
std::filesystem::path pca_model(const std::filesystem::path& out);
std::filesystem::path stage_manifest(const std::filesystem::path& out, const std::string& stage, const RunConfig& cfg);
}  // namespace layout

}  // namespace vidvisc

#include "vidvisc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <unistd.h>

#include "vidvisc/io_util.hpp"
#include "vidvisc/pca.hpp"
#include "vidvisc/pretrain.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vidvisc {

// ---- configuration ----

json RunConfig::defaults() {
  json classes = json::array();
  // Pairs differ by >=1.3x in omega or >=3x in gamma; fill is shared so it is not a cue.
  classes.push_back({{"name", "water"}, {"gamma", 0.008}, {"omega", 0.15}, {"fill", 0.45}});
  classes.push_back({{"name", "milk"}, {"gamma", 0.012}, {"omega", 0.45}, {"fill", 0.45}});
  classes.push_back({{"name", "oil"}, {"gamma", 0.03}, {"omega", 0.25}, {"fill", 0.45}});
  classes.push_back({{"name", "syrup"}, {"gamma", 0.05}, {"omega", 0.60}, {"fill", 0.45}});
  classes.push_back({{"name", "honey"}, {"gamma", 0.09}, {"omega", 0.35}, {"fill", 0.45}});
  return {
      {"task", "classification"},
      {"seed", 7},
      // synthetic videos
      {"frames", 150},
      {"render_height", 96},
      {"render_width", 128},
      {"fps", 30},
      {"videos_per_level", 30},
      {"test_videos_per_level", 6},
      {"classes", classes},
      {"levels", 8},
      {"level_min_cP", 1.0},
      {"level_max_cP", 250.0},
      {"amplitude_fraction", 0.2},
      {"omega", 0.3},
      {"fill", 0.45},
      {"noise_level", 0.01},
      {"jitter", 0.1},
      // clips
      {"clip_depth", 12},
      {"clip_height", 40},
      {"clip_width", 100},
      {"stride", 1},
      {"crop_pad", 2},
      {"latent_dim", 512},
      // autoencoder pretraining
      {"ae_lr_classification", 5e-5},
      {"ae_lr_regression", 7e-5},
      {"ae_weight_decay", 1e-5},
      {"ae_batch", 512},
      {"ae_micro_batch", 32},
      {"ae_epochs", 300},
      {"ae_clips_per_epoch", 0},
      {"augment", true},
      // regression head
      {"reg_mode", "frozen"},
      {"head_lr", 3e-5},
      {"head_batch", 512},
      {"head_micro_batch", 64},
      {"head_epochs", 200},
      {"head_clips_per_epoch", 0},
      {"head_hidden", {256, 64}},
      {"head_encoder_weight_decay", 1e-5},
      // logistic head
      {"logistic_lr", 1e-2},
      {"logistic_l2", 1e-4},
      {"logistic_tol", 1e-6},
      {"logistic_window", 10},
      {"logistic_max_epochs", 500},
      // latent analysis
      {"pca_components", 2},
      {"continuity_pairs", 1000},
  };
}

namespace {

bool same_kind(const json& ref, const json& v) {
  if (ref.is_number_float()) return v.is_number();
  if (ref.is_number_integer()) return v.is_number_integer();
  if (ref.is_boolean()) return v.is_boolean();
  if (ref.is_string()) return v.is_string();
  if (ref.is_array()) return v.is_array();
  return ref.type() == v.type();
}

void merge_into(json& dst, const json& overrides, const std::string& where) {
  if (!overrides.is_object()) throw ConfigError(where + ": expected a JSON object");
  const json ref = RunConfig::defaults();
  for (const auto& [k, v] : overrides.items()) {
    if (!ref.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
    if (!same_kind(ref.at(k), v)) throw ConfigError(where + ": key '" + k + "' has the wrong type");
    dst[k] = ref.at(k).is_number_float() ? json(v.get<double>()) : v;
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& overrides) {
  RunConfig c;
  c.values_ = defaults();
  merge_into(c.values_, overrides, "config");
  return c;
}

RunConfig RunConfig::from_file(const fs::path& path, const std::string& profile) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json file;
  try {
    in >> file;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!file.is_object()) throw ConfigError("config file must hold a JSON object of profiles");
  RunConfig c;
  c.values_ = defaults();
  if (file.contains("defaults")) merge_into(c.values_, file.at("defaults"), path.string() + " [defaults]");
  if (profile != "defaults") {
    if (!file.contains(profile)) throw ConfigError("config file has no profile '" + profile + "'");
    merge_into(c.values_, file.at(profile), path.string() + " [" + profile + "]");
  }
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const json ref = defaults();
  if (!ref.contains(key)) throw ConfigError("unknown option --" + key);
  const json& r = ref.at(key);
  json v;
  try {
    size_t used = 0;
    if (r.is_boolean()) {
      if (value != "true" && value != "false") throw ConfigError("");
      v = value == "true";
    } else if (r.is_number_integer()) {
      v = std::stoll(value, &used);
      if (used != value.size()) throw ConfigError("");
    } else if (r.is_number_float()) {
      v = std::stod(value, &used);
      if (used != value.size()) throw ConfigError("");
    } else if (r.is_string()) {
      v = value;
    } else {
      v = json::parse(value);
    }
  } catch (const std::exception&) {
    throw ConfigError("option --" + key + ": cannot parse '" + value + "'");
  }
  set_json(key, v);
}

void RunConfig::set_json(const std::string& key, const json& value) {
  merge_into(values_, json{{key, value}}, "option");
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  need(task() == "classification" || task() == "regression", "task must be classification or regression");
  try {
    parse_reg_mode(s("reg_mode"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  need(i("seed") >= 0, "seed must be non-negative");
  need(i("clip_depth") >= 1 && i("stride") >= 1, "clip_depth and stride must be positive");
  need(i("frames") > i("clip_depth"), "frames must exceed clip_depth");
  need(i("render_height") >= 8 && i("render_width") >= 8, "render size must be at least 8x8");
  need(i("fps") >= 1, "fps must be positive");
  need(i("videos_per_level") >= 2, "videos_per_level must be at least 2");
  need(i("test_videos_per_level") >= 1 && i("test_videos_per_level") < i("videos_per_level"),
       "test_videos_per_level must be in [1, videos_per_level)");
  need(i("levels") >= 2, "levels must be at least 2");
  need(d("level_min_cP") > 0 && d("level_max_cP") > d("level_min_cP"), "viscosity range must be positive and increasing");
  need(values_.at("classes").size() >= 2, "at least two classes are required");
  std::set<std::string> names;
  for (const auto& c : values_.at("classes")) {
    need(c.is_object() && c.contains("name") && c.contains("gamma") && c.contains("omega") && c.contains("fill"),
         "each class needs name, gamma, omega and fill");
    need(names.insert(c.at("name").get<std::string>()).second, "class names must be distinct");
  }
  need(i("crop_pad") >= 0, "crop_pad must be non-negative");
  need(i("pca_components") >= 2, "pca_components must be at least 2");
  need(i("continuity_pairs") >= 1, "continuity_pairs must be positive");
  need(i("logistic_window") >= 1 && i("logistic_max_epochs") >= 1, "logistic window and epochs must be positive");
  need(d("logistic_lr") > 0 && d("logistic_l2") >= 0 && d("logistic_tol") >= 0, "logistic hyperparameters out of range");
  try {
    encoder_config().validate();
    pretrain_config().validate();
    regressor_config().validate();
    generate_spec().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::string RunConfig::fingerprint() const {
  json v = values_;
  v.erase("reg_mode");
  return hex64(fnv1a64(v.dump()));
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig c;
  c.clip_extent = {i("clip_depth"), i("clip_height"), i("clip_width")};
  c.latent_dim = i("latent_dim");
  return c;
}

GenerateSpec RunConfig::generate_spec() const {
  GenerateSpec g;
  g.kind = task() == "classification" ? LabelKind::class_name : LabelKind::viscosity_cP;
  for (const auto& c : values_.at("classes")) {
    g.classes.push_back({c.at("name").get<std::string>(), c.at("gamma").get<double>(), c.at("omega").get<double>(),
                         c.at("fill").get<double>()});
  }
  g.viscosities_cP = log_spaced_levels(static_cast<int>(i("levels")), d("level_min_cP"), d("level_max_cP"));
  g.videos_per_label = static_cast<int>(i("videos_per_level"));
  g.test_videos_per_label = static_cast<int>(i("test_videos_per_level"));
  g.frames = i("frames");
  g.height = i("render_height");
  g.width = i("render_width");
  g.fps = static_cast<uint32_t>(i("fps"));
  g.amplitude_fraction = d("amplitude_fraction");
  g.omega = d("omega");
  g.fill = d("fill");
  g.noise_level = d("noise_level");
  g.jitter = d("jitter");
  g.master_seed = static_cast<uint64_t>(i("seed"));
  return g;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig p;
  p.lr = d(task() == "classification" ? "ae_lr_classification" : "ae_lr_regression");
  p.weight_decay = d("ae_weight_decay");
  p.batch = i("ae_batch");
  p.micro_batch = i("ae_micro_batch");
  p.epochs = i("ae_epochs");
  p.clips_per_epoch = i("ae_clips_per_epoch");
  p.augment = b("augment");
  p.seed = derive_seed(static_cast<uint64_t>(i("seed")), 101);
  return p;
}

RegressorConfig RunConfig::regressor_config() const {
  RegressorConfig r;
  r.hidden = values_.at("head_hidden").get<std::vector<int64_t>>();
  r.lr = d("head_lr");
  r.encoder_weight_decay = d("head_encoder_weight_decay");
  r.batch = i("head_batch");
  r.micro_batch = i("head_micro_batch");
  r.epochs = i("head_epochs");
  r.clips_per_epoch = i("head_clips_per_epoch");
  r.seed = derive_seed(static_cast<uint64_t>(i("seed")), 202);
  return r;
}

LogisticConfig RunConfig::logistic_config() const {
  LogisticConfig l;
  l.lr = d("logistic_lr");
  l.l2 = d("logistic_l2");
  l.tol = d("logistic_tol");
  l.window = i("logistic_window");
  l.max_epochs = i("logistic_max_epochs");
  return l;
}

// ---- layout ----

namespace layout {
fs::path raw_manifest(const fs::path& out) { return out / "data" / "manifest.tsv"; }
fs::path prepared_manifest(const fs::path& out) { return out / "prepared" / "manifest.tsv"; }
fs::path autoencoder(const fs::path& out) { return out / "autoencoder.v2vc"; }
fs::path logistic(const fs::path& out) { return out / "logistic.v2vc"; }
fs::path regressor(const fs::path& out, RegMode mode) { return out / ("regressor_" + to_string(mode) + ".v2vc"); }
fs::path metrics(const fs::path& out, const RunConfig& cfg) {
  return cfg.task() == "classification" ? out / "metrics.json" : out / ("metrics_" + cfg.s("reg_mode") + ".json");
}
fs::path pca_model(const fs::path& out) { return out / "pca_model.json"; }
fs::path stage_manifest(const fs::path& out, const std::string& stage, const RunConfig& cfg) {
  const bool per_mode = cfg.task() == "regression" && (stage == "train-reg" || stage == "eval");
  return out / (per_mode ? stage + "-" + cfg.s("reg_mode") + ".stage.json" : stage + ".stage.json");
}
}  // namespace layout

// ---- lock ----

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".vidvisc.lock") {
  fs::create_directories(dir);
  FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) throw std::runtime_error("output directory is locked by another run: " + path_.string());
  std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
  std::fclose(f);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---- stages ----

namespace {

struct LoadedVideo {
  const ManifestEntry* entry;
  MaskVideo video;
};

std::string file_hash(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput("missing input " + p.string());
  return hex64(fnv1a64(read_file(p)));
}

// Manifest hash combined with the hashes of every file it lists.
std::string dataset_hash(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path)) throw MissingInput("missing input " + manifest_path.string());
  const Manifest m = read_manifest(manifest_path);
  std::string all = file_hash(manifest_path);
  for (const auto& e : m.entries) all += file_hash(m.resolve(e));
  return hex64(fnv1a64(all));
}

std::vector<LoadedVideo> load_split(const Manifest& m, const std::string& split) {
  std::vector<LoadedVideo> out;
  for (const auto* e : m.split(split)) out.push_back({e, read_mvid(m.resolve(*e))});
  if (out.empty()) throw MissingInput("prepared manifest has no '" + split + "' videos");
  return out;
}

std::vector<Clip> windows(const std::vector<LoadedVideo>& videos, const RunConfig& cfg,
                          std::vector<size_t>* owner = nullptr) {
  std::vector<Clip> clips;
  for (size_t v = 0; v < videos.size(); ++v) {
    auto c = sliding_window(videos[v].video, cfg.i("clip_depth"), cfg.i("stride"));
    if (owner) owner->insert(owner->end(), c.size(), v);
    clips.insert(clips.end(), std::make_move_iterator(c.begin()), std::make_move_iterator(c.end()));
  }
  return clips;
}

std::vector<const Clip*> pointers(const std::vector<Clip>& clips) {
  std::vector<const Clip*> p;
  for (const auto& c : clips) p.push_back(&c);
  return p;
}

int class_index(const std::vector<std::string>& names, const std::string& label) {
  auto it = std::find(names.begin(), names.end(), label);
  if (it == names.end()) throw ConfigError("label '" + label + "' is not among the trained classes");
  return static_cast<int>(it - names.begin());
}

void require_task(const RunConfig& cfg, const std::string& task, const std::string& stage) {
  if (cfg.task() != task) throw ConfigError(stage + " requires task " + task + ", config has " + cfg.task());
}

Checkpoint load_input_checkpoint(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput("missing input " + p.string() + " (run the earlier stage first)");
  return load_checkpoint(p);
}

struct StagePlan {
  std::vector<std::pair<std::string, fs::path>> inputs;  // name, path (manifest => dataset hash)
  std::vector<fs::path> outputs;
};

StagePlan plan(const std::string& stage, const RunConfig& cfg, const fs::path& out) {
  StagePlan p;
  const bool cls = cfg.task() == "classification";
  const RegMode mode = parse_reg_mode(cfg.s("reg_mode"));
  if (stage == "gen") {
    p.outputs = {layout::raw_manifest(out)};
  } else if (stage == "prepare") {
    p.inputs = {{"raw_dataset", layout::raw_manifest(out)}};
    p.outputs = {layout::prepared_manifest(out)};
  } else if (stage == "pretrain") {
    p.inputs = {{"dataset", layout::prepared_manifest(out)}};
    p.outputs = {layout::autoencoder(out), out / "pretrain_history.csv"};
  } else if (stage == "train-cls") {
    p.inputs = {{"dataset", layout::prepared_manifest(out)}, {"autoencoder", layout::autoencoder(out)}};
    p.outputs = {layout::logistic(out)};
  } else if (stage == "train-reg") {
    p.inputs = {{"dataset", layout::prepared_manifest(out)}};
    if (mode != RegMode::scratch) p.inputs.push_back({"autoencoder", layout::autoencoder(out)});
    p.outputs = {layout::regressor(out, mode), out / ("regressor_" + to_string(mode) + "_history.csv")};
  } else if (stage == "eval") {
    p.inputs = {{"dataset", layout::prepared_manifest(out)}};
    if (cls) {
      p.inputs.push_back({"autoencoder", layout::autoencoder(out)});
      p.inputs.push_back({"logistic", layout::logistic(out)});
    } else {
      p.inputs.push_back({"regressor", layout::regressor(out, mode)});
      p.outputs.push_back(out / ("plot_" + to_string(mode) + ".csv"));
    }
    p.outputs.push_back(layout::metrics(out, cfg));
  } else if (stage == "pca") {
    p.inputs = {{"dataset", layout::prepared_manifest(out)}, {"autoencoder", layout::autoencoder(out)}};
    p.outputs = {layout::pca_model(out), out / "pca_summary.json"};
  } else {
    throw ConfigError("unknown stage '" + stage + "'");
  }
  return p;
}

json stage_gen(const RunConfig& cfg, const fs::path& out) {
  const fs::path dir = out / "data";
  fs::remove_all(dir);
  const Manifest m = generate_dataset(cfg.generate_spec(), dir);
  return {{"videos", m.entries.size()}};
}

json stage_prepare(const RunConfig& cfg, const fs::path& out) {
  Manifest raw = read_manifest(layout::raw_manifest(out));
  if (std::any_of(raw.entries.begin(), raw.entries.end(), [](const auto& e) { return e.split.empty(); })) {
    assign_split(raw, static_cast<int>(cfg.i("test_videos_per_level")));
  }
  const fs::path dir = out / "prepared";
  fs::remove_all(dir);
  Manifest prepared;
  prepared.base_dir = dir;
  for (const auto& e : raw.entries) {
    const MaskVideo v = read_mvid(raw.resolve(e));
    if (v.frames <= cfg.i("clip_depth")) {
      throw ConfigError("video " + e.path + " has " + std::to_string(v.frames) + " frames, clips need more than " +
                        std::to_string(cfg.i("clip_depth")));
    }
    const MaskVideo r = resize_crop(v, cfg.i("clip_height"), cfg.i("clip_width"), cfg.i("crop_pad"));
    const std::string rel = "videos/" + fs::path(e.path).filename().string();
    write_mvid(dir / rel, r);
    prepared.entries.push_back({rel, e.kind, e.label, e.split});
  }
  write_manifest(layout::prepared_manifest(out), prepared);
  return {{"videos", prepared.entries.size()}};
}

json stage_pretrain(const RunConfig& cfg, const fs::path& out, const LogFn& log) {
  const Manifest m = read_manifest(layout::prepared_manifest(out));
  const auto train = load_split(m, "train");
  const auto clips = windows(train, cfg);
  auto res = pretrain(clips, cfg.encoder_config(), cfg.pretrain_config(), [&](int64_t e, double l) {
    if (log) log("pretrain epoch " + std::to_string(e) + " loss " + std::to_string(l));
  });
  res.checkpoint.metadata["dataset_fingerprint"] = dataset_hash(layout::prepared_manifest(out));
  res.checkpoint.metadata["task"] = cfg.task();
  save_checkpoint(layout::autoencoder(out), res.checkpoint);
  write_history_csv(out / "pretrain_history.csv", res.history);
  json s = {{"train_clips", clips.size()}, {"epochs", res.history.size()}};
  if (!res.history.empty()) {
    s["initial_loss"] = res.history.front();
    s["final_loss"] = res.history.back();
  }
  return s;
}

json stage_train_cls(const RunConfig& cfg, const fs::path& out) {
  require_task(cfg, "classification", "train-cls");
  const Manifest m = read_manifest(layout::prepared_manifest(out));
  const auto names = m.class_names();
  Autoencoder ae = load_autoencoder(load_input_checkpoint(layout::autoencoder(out)), cfg.encoder_config());
  const auto train = load_split(m, "train");
  std::vector<size_t> owner;
  const auto clips = windows(train, cfg, &owner);
  const Tensor<double> z = encode_clips(ae.encoder(), pointers(clips)).cast<double>();
  std::vector<int> labels;
  for (size_t v : owner) labels.push_back(class_index(names, train[v].entry->label));
  const LogisticModel model = fit_logistic(z, labels, names, cfg.logistic_config());
  save_checkpoint(layout::logistic(out), logistic_checkpoint(model));
  const auto pred = model.predict(z);
  int64_t hit = 0;
  for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return {{"train_clips", clips.size()},
          {"train_accuracy", static_cast<double>(hit) / static_cast<double>(pred.size())},
          {"epochs_run", model.epochs_run}};
}

json stage_train_reg(const RunConfig& cfg, const fs::path& out, const LogFn& log) {
  require_task(cfg, "regression", "train-reg");
  const RegMode mode = parse_reg_mode(cfg.s("reg_mode"));
  const Manifest m = read_manifest(layout::prepared_manifest(out));
  Checkpoint ae;
  if (mode != RegMode::scratch) ae = load_input_checkpoint(layout::autoencoder(out));
  const auto train = load_split(m, "train");
  std::vector<size_t> owner;
  const auto clips = windows(train, cfg, &owner);
  std::vector<double> labels;
  for (size_t v : owner) labels.push_back(train[v].entry->viscosity());
  const RegressorConfig hyper = cfg.regressor_config();
  auto res = train_regressor(mode == RegMode::scratch ? nullptr : &ae, cfg.encoder_config(), clips, labels, mode,
                             hyper, [&](int64_t e, double l) {
                               if (log) log("train-reg " + to_string(mode) + " epoch " + std::to_string(e) + " mse " + std::to_string(l));
                             });
  if (mode == RegMode::frozen && !res.encoder_unchanged) {
    throw std::logic_error("frozen regression changed encoder parameters");
  }
  Checkpoint ckpt = regressor_checkpoint(res.predictor, hyper);
  ckpt.metadata["encoder_unchanged"] = res.encoder_unchanged;
  save_checkpoint(layout::regressor(out, mode), ckpt);
  write_history_csv(out / ("regressor_" + to_string(mode) + "_history.csv"), res.history);
  json s = {{"mode", to_string(mode)}, {"train_clips", clips.size()}, {"encoder_unchanged", res.encoder_unchanged}};
  if (!res.history.empty()) s["final_mse"] = res.history.back();
  return s;
}

json stage_eval(const RunConfig& cfg, const fs::path& out) {
  const Manifest m = read_manifest(layout::prepared_manifest(out));
  const auto test = load_split(m, "test");
  const int64_t depth = cfg.i("clip_depth");
  json metrics;
  if (cfg.task() == "classification") {
    Autoencoder ae = load_autoencoder(load_input_checkpoint(layout::autoencoder(out)), cfg.encoder_config());
    const LogisticModel model = load_logistic(load_input_checkpoint(layout::logistic(out)));
    std::vector<int> clip_pred, clip_true, video_pred, video_true;
    for (const auto& v : test) {
      const int truth = class_index(model.class_names, v.entry->label);
      const auto clips = sliding_window(v.video, depth, cfg.i("stride"));
      for (int p : model.predict(encode_clips(ae.encoder(), pointers(clips)).cast<double>())) {
        clip_pred.push_back(p);
        clip_true.push_back(truth);
      }
      const auto infer = nonoverlap_clips(v.video, depth);
      video_pred.push_back(predict_video_class(model, encode_clips(ae.encoder(), pointers(infer)).cast<double>()));
      video_true.push_back(truth);
    }
    metrics = evaluate_classification(clip_pred, clip_true, video_pred, video_true,
                                      static_cast<int>(model.class_names.size()))
                  .to_json(model.class_names);
  } else {
    const RegMode mode = parse_reg_mode(cfg.s("reg_mode"));
    ViscosityPredictor pred = load_regressor(load_input_checkpoint(layout::regressor(out, mode)), cfg.encoder_config());
    std::vector<double> clip_pred, clip_true, video_pred, video_true;
    for (const auto& v : test) {
      const double truth = v.entry->viscosity();
      const auto clips = sliding_window(v.video, depth, cfg.i("stride"));
      for (double p : pred.predict(pointers(clips))) {
        clip_pred.push_back(p);
        clip_true.push_back(truth);
      }
      const auto infer = nonoverlap_clips(v.video, depth);
      video_pred.push_back(predict_video_viscosity(pred, pointers(infer)));
      video_true.push_back(truth);
    }
    const RegressionMetrics r = evaluate_regression(clip_pred, clip_true, video_pred, video_true);
    metrics = r.to_json();
    metrics["mode"] = to_string(mode);
    write_level_csv(out / ("plot_" + to_string(mode) + ".csv"), r);
  }
  write_text_atomic(layout::metrics(out, cfg), metrics.dump(2) + "\n");
  return metrics;
}

json stage_pca(const RunConfig& cfg, const fs::path& out) {
  const Manifest m = read_manifest(layout::prepared_manifest(out));
  Autoencoder ae = load_autoencoder(load_input_checkpoint(layout::autoencoder(out)), cfg.encoder_config());
  const auto train = load_split(m, "train");
  const auto clips = windows(train, cfg);
  const Tensor<double> z = encode_clips(ae.encoder(), pointers(clips)).cast<double>();
  const PcaModel pca = pca_fit(z, cfg.i("pca_components"));
  write_text_atomic(layout::pca_model(out), pca_to_json(pca).dump() + "\n");

  const auto test = load_split(m, "test");
  json videos = json::array();
  int64_t continuous = 0;
  for (size_t i = 0; i < test.size(); ++i) {
    const auto& v = test[i];
    const std::string stem = fs::path(v.entry->path).stem().string();
    const Trajectory t = trajectory_export(ae.encoder(), v.video, pca, out / "trajectories" / (stem + ".csv"),
                                           cfg.i("clip_depth"));
    const double step = mean_step_distance(t.points);
    const double pair = mean_random_pair_distance(t.points, cfg.i("continuity_pairs"),
                                                  derive_seed(static_cast<uint64_t>(cfg.i("seed")), 303 + i));
    continuous += step < pair;
    videos.push_back({{"video", stem}, {"label", v.entry->label}, {"points", t.start_frames.size()},
                      {"mean_step_distance", step}, {"mean_pair_distance", pair}, {"continuous", step < pair}});
  }
  double total = 0;
  for (double e : pca.explained_variance) total += e;
  json summary = {{"train_clips", clips.size()},
                  {"explained_variance", pca.explained_variance},
                  {"explained_ratio", total > 0 && pca.total_variance > 0 ? total / pca.total_variance : 0.0},
                  {"videos", videos},
                  {"continuous_videos", continuous},
                  {"n_videos", test.size()}};
  write_text_atomic(out / "pca_summary.json", summary.dump(2) + "\n");
  return summary;
}

std::string now_utc() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace

StageResult run_stage(const std::string& stage, const RunConfig& cfg, const fs::path& out, const LogFn& log) {
  cfg.validate();
  const StagePlan p = plan(stage, cfg, out);
  json inputs = json::object();
  for (const auto& [name, path] : p.inputs) {
    inputs[name] = path.filename() == "manifest.tsv" ? dataset_hash(path) : file_hash(path);
  }
  const fs::path manifest_path = layout::stage_manifest(out, stage, cfg);
  StageResult res;
  res.stage = stage;
  if (fs::exists(manifest_path)) {
    try {
      const json prev = json::parse(read_file(manifest_path));
      const bool outputs_exist =
          std::all_of(p.outputs.begin(), p.outputs.end(), [](const fs::path& o) { return fs::exists(o); });
      if (outputs_exist && prev.at("config_fingerprint") == cfg.fingerprint() && prev.at("inputs") == inputs) {
        res.skipped = true;
        res.summary = prev.value("summary", json::object());
        if (log) log(stage + ": unchanged, skipped");
        return res;
      }
    } catch (const json::exception&) {
      // Unreadable manifest: rerun the stage.
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  if (stage == "gen") res.summary = stage_gen(cfg, out);
  else if (stage == "prepare") res.summary = stage_prepare(cfg, out);
  else if (stage == "pretrain") res.summary = stage_pretrain(cfg, out, log);
  else if (stage == "train-cls") res.summary = stage_train_cls(cfg, out);
  else if (stage == "train-reg") res.summary = stage_train_reg(cfg, out, log);
  else if (stage == "eval") res.summary = stage_eval(cfg, out);
  else res.summary = stage_pca(cfg, out);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json outputs = json::array();
  for (const auto& o : p.outputs) outputs.push_back(fs::relative(o, out).string());
  const json record = {{"stage", stage},
                       {"config_fingerprint", cfg.fingerprint()},
                       {"inputs", inputs},
                       {"outputs", outputs},
                       {"wall_seconds", res.wall_seconds},
                       {"finished_at", now_utc()},
                       {"summary", res.summary}};
  write_text_atomic(manifest_path, record.dump(2) + "\n");
  if (log) log(stage + ": done in " + std::to_string(res.wall_seconds) + " s");
  return res;
}

std::vector<StageResult> run_pipeline(const RunConfig& cfg, const fs::path& out, const LogFn& log) {
  std::vector<StageResult> results;
  const bool cls = cfg.task() == "classification";
  for (const char* s : {"gen", "prepare", "pretrain"}) results.push_back(run_stage(s, cfg, out, log));
  results.push_back(run_stage(cls ? "train-cls" : "train-reg", cfg, out, log));
  results.push_back(run_stage("eval", cfg, out, log));
  if (cls) results.push_back(run_stage("pca", cfg, out, log));
  return results;
}

}  // namespace vidvisc

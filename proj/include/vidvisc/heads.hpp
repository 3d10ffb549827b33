#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidvisc/autoencoder.hpp"
#include "vidvisc/dataset.hpp"
#include "vidvisc/pretrain.hpp"

namespace vidvisc {

// ---- multinomial logistic regression ----

struct LogisticConfig {
  double lr = 1e-2;
  double l2 = 1e-4;      // on standardised weights, not the bias
  double tol = 1e-6;     // relative loss change over `window` epochs
  int64_t window = 10;
  int64_t max_epochs = 500;

  nlohmann::json to_json() const;
};

struct LogisticModel {
  Tensor<double> weight;  // [L,K], acts on raw latents
  Tensor<double> bias;    // [K]
  std::vector<std::string> class_names;
  int64_t epochs_run = 0;
  double final_loss = 0;

  int64_t classes() const { return weight.dim(1); }
  Tensor<double> logits(const Tensor<double>& latents) const;
  Tensor<double> probabilities(const Tensor<double>& latents) const;
  std::vector<int> predict(const Tensor<double>& latents) const;
};

// Full-batch Adam on standardised features; the standardisation is folded
// back into weight and bias. Rejects fewer than two classes.
LogisticModel fit_logistic(const Tensor<double>& latents, const std::vector<int>& labels,
                           std::vector<std::string> class_names, const LogisticConfig& cfg = {});

// Most frequent vote; ties go to the lowest class index.
int majority_vote(std::span<const int> votes);
int predict_video_class(const LogisticModel& model, const Tensor<double>& video_latents);

Checkpoint logistic_checkpoint(const LogisticModel& model);
LogisticModel load_logistic(const Checkpoint& ckpt);

// ---- viscosity regression ----

enum class RegMode { frozen, unfrozen, scratch };
std::string to_string(RegMode mode);
RegMode parse_reg_mode(const std::string& s);

struct RegressorConfig {
  std::vector<int64_t> hidden{256, 64};
  double lr = 3e-5;
  double encoder_weight_decay = 1e-5;  // unfrozen and scratch only; the head has none
  int64_t batch = 512;
  int64_t micro_batch = 64;
  int64_t epochs = 200;
  int64_t clips_per_epoch = 0;  // as in PretrainConfig
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

// MLP L -> hidden... -> 1 with relu between layers. The raw output is mapped
// to cP as label_mean + label_std * y, fixed from the training labels.
struct MlpHead {
  std::vector<LinearLayer> layers;
  double label_mean = 0, label_std = 1;

  MlpHead() = default;
  MlpHead(int64_t in, const std::vector<int64_t>& hidden, uint64_t seed);
  Var forward(const Var& latents) const;
  std::vector<NamedParam> parameters() const;
};

struct ViscosityPredictor {
  RegMode mode = RegMode::frozen;
  Encoder encoder;
  MlpHead head;

  // Per-clip predictions in cP, batch norm in eval mode.
  std::vector<double> predict(std::span<const Clip* const> clips, int64_t chunk = 32);
};

struct RegressorResult {
  ViscosityPredictor predictor;
  std::vector<double> history;  // mean training mse per epoch
  bool encoder_unchanged = false;  // bitwise comparison before/after training
};

// `encoder_ckpt` is required for frozen and unfrozen and ignored by scratch.
// All modes share the same clip schedule for a given seed.
RegressorResult train_regressor(const Checkpoint* encoder_ckpt, const EncoderConfig& cfg, std::span<const Clip> clips,
                                std::span<const double> labels, RegMode mode, const RegressorConfig& hyper,
                                const EpochCallback& on_epoch = {});

double predict_video_viscosity(std::span<const double> clip_predictions);
double predict_video_viscosity(ViscosityPredictor& predictor, std::span<const Clip* const> clips);

Checkpoint regressor_checkpoint(ViscosityPredictor& predictor, const RegressorConfig& hyper);
ViscosityPredictor load_regressor(const Checkpoint& ckpt, const EncoderConfig& expected);

// ---- metrics ----

struct ClassificationMetrics {
  double datapoint_accuracy = 0, video_accuracy = 0;
  int64_t clips = 0, videos = 0;
  std::vector<std::vector<int64_t>> confusion;  // rows = true class, over clips
  std::vector<std::vector<int64_t>> video_confusion;

  nlohmann::json to_json(const std::vector<std::string>& names) const;
};

ClassificationMetrics evaluate_classification(std::span<const int> clip_pred, std::span<const int> clip_true,
                                              std::span<const int> video_pred, std::span<const int> video_true,
                                              int classes);

struct LevelRow {
  double label = 0, mean_prediction = 0, std_prediction = 0;
  int64_t count = 0;
};

struct RegressionMetrics {
  double mae = 0;        // over clips
  double video_mae = 0;  // over per-video averages
  int64_t clips = 0, videos = 0;
  std::vector<LevelRow> levels;  // per distinct label, ascending

  nlohmann::json to_json() const;
};

RegressionMetrics evaluate_regression(std::span<const double> clip_pred, std::span<const double> clip_true,
                                      std::span<const double> video_pred, std::span<const double> video_true);

// CSV `label_cP,mean_prediction_cP,std_prediction_cP`.
void write_level_csv(const std::filesystem::path& path, const RegressionMetrics& metrics);

}  // namespace vidvisc

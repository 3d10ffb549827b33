#include "vidvisc/heads.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>

#include "vidvisc/io_util.hpp"

namespace vidvisc {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapD = Eigen::Map<MatD>;
using CMapD = Eigen::Map<const MatD>;

// Row-wise softmax cross-entropy mean; fills `grad` with dLoss/dlogits.
double softmax_ce(const MatD& logits, const std::vector<int>& y, MatD& grad) {
  const auto n = logits.rows();
  grad.resize(logits.rows(), logits.cols());
  double loss = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const auto ex = (logits.row(i).array() - mx).exp();
    const double z = ex.sum();
    grad.row(i) = ex / z;
    loss += std::log(z) + mx - logits(i, y[i]);
    grad(i, y[i]) -= 1.0;
  }
  grad /= static_cast<double>(n);
  return loss / static_cast<double>(n);
}

}  // namespace

nlohmann::json LogisticConfig::to_json() const {
  return {{"lr", lr}, {"l2", l2}, {"tol", tol}, {"window", window}, {"max_epochs", max_epochs}};
}

Tensor<double> LogisticModel::logits(const Tensor<double>& latents) const {
  if (latents.rank() != 2 || latents.dim(1) != weight.dim(0)) {
    throw ShapeError("logistic: latents " + shape_str(latents.shape()) + " do not match weight " +
                     shape_str(weight.shape()));
  }
  Tensor<double> out({latents.dim(0), classes()});
  MapD o(out.raw(), out.dim(0), out.dim(1));
  o.noalias() = CMapD(latents.raw(), latents.dim(0), latents.dim(1)) * CMapD(weight.raw(), weight.dim(0), weight.dim(1));
  o.rowwise() += CMapD(bias.raw(), 1, bias.dim(0)).row(0);
  return out;
}

Tensor<double> LogisticModel::probabilities(const Tensor<double>& latents) const {
  return softmax_rows(logits(latents));
}

std::vector<int> LogisticModel::predict(const Tensor<double>& latents) const {
  const Tensor<double> z = logits(latents);
  std::vector<int> out(static_cast<size_t>(z.dim(0)));
  for (int64_t i = 0; i < z.dim(0); ++i) {
    const double* row = z.raw() + i * z.dim(1);
    out[i] = static_cast<int>(std::max_element(row, row + z.dim(1)) - row);
  }
  return out;
}

LogisticModel fit_logistic(const Tensor<double>& latents, const std::vector<int>& labels,
                           std::vector<std::string> class_names, const LogisticConfig& cfg) {
  if (latents.rank() != 2 || latents.dim(0) != static_cast<int64_t>(labels.size())) {
    throw ShapeError("fit_logistic: " + shape_str(latents.shape()) + " latents for " +
                     std::to_string(labels.size()) + " labels");
  }
  const auto k = static_cast<int64_t>(class_names.size());
  std::vector<int64_t> counts(static_cast<size_t>(std::max<int64_t>(k, 0)), 0);
  for (int y : labels) {
    if (y < 0 || y >= k) throw std::out_of_range("fit_logistic: label " + std::to_string(y) + " out of range");
    ++counts[y];
  }
  if (std::count_if(counts.begin(), counts.end(), [](int64_t c) { return c > 0; }) < 2) {
    throw std::invalid_argument("fit_logistic: need examples of at least two classes");
  }
  const int64_t n = latents.dim(0), l = latents.dim(1);

  // Standardise features with the population statistics.
  CMapD x(latents.raw(), n, l);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  Eigen::RowVectorXd sigma = ((x.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  for (Eigen::Index j = 0; j < sigma.size(); ++j) {
    if (!(sigma[j] > 1e-12)) sigma[j] = 1.0;
  }
  const MatD z = (x.rowwise() - mu).array().rowwise() / sigma.array();

  std::vector<double> w(static_cast<size_t>(l * k), 0.0), b(static_cast<size_t>(k), 0.0);
  AdamMoments<double> mw, mb;
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  MatD grad, logits;
  std::vector<double> history;
  LogisticModel model;
  for (int64_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    MapD wm(w.data(), l, k);
    logits = z * wm;
    logits.rowwise() += Eigen::Map<Eigen::RowVectorXd>(b.data(), k);
    double loss = softmax_ce(logits, labels, grad);
    loss += 0.5 * cfg.l2 * wm.squaredNorm();
    MatD gw = z.transpose() * grad + cfg.l2 * wm;
    Eigen::RowVectorXd gb = grad.colwise().sum();
    adam_step<double>(w, std::span<const double>(gw.data(), static_cast<size_t>(gw.size())), mw, acfg, epoch);
    adam_step<double>(b, std::span<const double>(gb.data(), static_cast<size_t>(gb.size())), mb, acfg, epoch);
    history.push_back(loss);
    model.epochs_run = epoch;
    model.final_loss = loss;
    if (!std::isfinite(loss)) throw TrainingDiverged("fit_logistic: loss is not finite", epoch);
    if (static_cast<int64_t>(history.size()) > cfg.window) {
      const double before = history[history.size() - 1 - static_cast<size_t>(cfg.window)];
      if (std::abs(before - loss) < cfg.tol * std::abs(before)) break;
    }
  }

  // Fold the standardisation into the affine map on raw latents.
  model.weight = Tensor<double>({l, k});
  model.bias = Tensor<double>({k});
  MapD wraw(model.weight.raw(), l, k);
  CMapD ws(w.data(), l, k);
  wraw = ws.array().colwise() / sigma.transpose().array();
  Eigen::Map<Eigen::RowVectorXd>(model.bias.raw(), k) =
      Eigen::Map<const Eigen::RowVectorXd>(b.data(), k) - mu * wraw;
  model.class_names = std::move(class_names);
  return model;
}

int majority_vote(std::span<const int> votes) {
  if (votes.empty()) throw std::invalid_argument("majority_vote: no votes");
  std::map<int, int64_t> tally;
  for (int v : votes) ++tally[v];
  int best = tally.begin()->first;
  int64_t best_n = 0;
  for (const auto& [cls, cnt] : tally) {
    if (cnt > best_n) {
      best = cls;
      best_n = cnt;
    }
  }
  return best;
}

int predict_video_class(const LogisticModel& model, const Tensor<double>& video_latents) {
  if (video_latents.dim(0) < 1) throw std::invalid_argument("predict_video_class: no clips");
  const auto votes = model.predict(video_latents);
  return majority_vote(votes);
}

Checkpoint logistic_checkpoint(const LogisticModel& model) {
  Checkpoint ckpt;
  ckpt.put("logistic.weight", model.weight);
  ckpt.put("logistic.bias", model.bias);
  ckpt.metadata["kind"] = "logistic";
  ckpt.metadata["class_names"] = model.class_names;
  ckpt.metadata["epochs_run"] = model.epochs_run;
  ckpt.metadata["final_loss"] = model.final_loss;
  return ckpt;
}

LogisticModel load_logistic(const Checkpoint& ckpt) {
  if (ckpt.metadata.value("kind", "") != "logistic") throw CheckpointMismatch("checkpoint is not a logistic model");
  LogisticModel m;
  m.weight = ckpt.f64("logistic.weight");
  m.bias = ckpt.f64("logistic.bias");
  m.class_names = ckpt.metadata.at("class_names").get<std::vector<std::string>>();
  m.epochs_run = ckpt.metadata.value("epochs_run", int64_t{0});
  m.final_loss = ckpt.metadata.value("final_loss", 0.0);
  if (m.weight.rank() != 2 || m.weight.dim(1) != static_cast<int64_t>(m.class_names.size()) ||
      m.bias.size() != m.class_names.size()) {
    throw CheckpointMismatch("logistic checkpoint shapes disagree with its class list");
  }
  return m;
}

std::string to_string(RegMode mode) {
  switch (mode) {
    case RegMode::frozen: return "frozen";
    case RegMode::unfrozen: return "unfrozen";
    case RegMode::scratch: return "scratch";
  }
  return "?";
}

RegMode parse_reg_mode(const std::string& s) {
  if (s == "frozen") return RegMode::frozen;
  if (s == "unfrozen") return RegMode::unfrozen;
  if (s == "scratch") return RegMode::scratch;
  throw std::invalid_argument("unknown regression mode '" + s + "' (expected frozen, unfrozen or scratch)");
}

void RegressorConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("regressor: lr must be positive");
  if (encoder_weight_decay < 0) throw std::invalid_argument("regressor: weight decay must be non-negative");
  if (batch < 1 || micro_batch < 1) throw std::invalid_argument("regressor: batch sizes must be positive");
  if (epochs < 0 || clips_per_epoch < 0) throw std::invalid_argument("regressor: epochs and clips_per_epoch must be >= 0");
  for (auto h : hidden) {
    if (h < 1) throw std::invalid_argument("regressor: hidden sizes must be positive");
  }
}

nlohmann::json RegressorConfig::to_json() const {
  return {{"hidden", hidden},         {"lr", lr},         {"encoder_weight_decay", encoder_weight_decay},
          {"batch", batch},           {"micro_batch", micro_batch}, {"epochs", epochs},
          {"clips_per_epoch", clips_per_epoch}, {"seed", seed}};
}

MlpHead::MlpHead(int64_t in, const std::vector<int64_t>& hidden, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int64_t> sizes{in};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  for (size_t i = 0; i + 1 < sizes.size(); ++i) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(sizes[i]));
    layers.push_back({Var(Tensor<float>::uniform({sizes[i], sizes[i + 1]}, -bound, bound, rng), true),
                      Var(Tensor<float>::zeros({sizes[i + 1]}), true)});
  }
}

Var MlpHead::forward(const Var& latents) const {
  Var x = latents;
  for (size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].forward(x);
    if (i + 1 < layers.size()) x = relu(x);
  }
  return affine(x, static_cast<float>(label_std), static_cast<float>(label_mean));
}

std::vector<NamedParam> MlpHead::parameters() const {
  std::vector<NamedParam> out;
  for (size_t i = 0; i < layers.size(); ++i) {
    out.push_back({"head.fc" + std::to_string(i + 1) + ".weight", layers[i].weight});
    out.push_back({"head.fc" + std::to_string(i + 1) + ".bias", layers[i].bias});
  }
  return out;
}

std::vector<double> ViscosityPredictor::predict(std::span<const Clip* const> clips, int64_t chunk) {
  NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(clips.size());
  for (size_t s = 0; s < clips.size(); s += static_cast<size_t>(chunk)) {
    const size_t n = std::min(clips.size() - s, static_cast<size_t>(chunk));
    Var y = head.forward(encoder.forward(Var(stack_clips(clips.subspan(s, n))), NormMode::eval));
    for (size_t i = 0; i < n; ++i) out.push_back(y.value()[i]);
  }
  return out;
}

namespace {

std::vector<std::vector<float>> snapshot(const std::vector<NamedParam>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& p : params) out.push_back(p.var.value().storage());
  return out;
}

}  // namespace

RegressorResult train_regressor(const Checkpoint* encoder_ckpt, const EncoderConfig& cfg, std::span<const Clip> clips,
                                std::span<const double> labels, RegMode mode, const RegressorConfig& hyper,
                                const EpochCallback& on_epoch) {
  hyper.validate();
  if (clips.empty()) throw std::invalid_argument("train_regressor: no training clips");
  if (clips.size() != labels.size()) throw std::invalid_argument("train_regressor: clip/label count mismatch");
  for (double v : labels) {
    if (!(v > 0) || !std::isfinite(v)) throw std::invalid_argument("train_regressor: labels must be positive");
  }

  RegressorResult res;
  ViscosityPredictor& pred = res.predictor;
  pred.mode = mode;
  if (mode == RegMode::scratch) {
    pred.encoder = Encoder(cfg, derive_seed(hyper.seed, 0xE1));
  } else {
    if (!encoder_ckpt) throw std::invalid_argument("train_regressor: " + to_string(mode) + " mode needs a checkpoint");
    pred.encoder = load_autoencoder(*encoder_ckpt, cfg).encoder().clone();
  }
  pred.head = MlpHead(cfg.latent_dim, hyper.hidden, derive_seed(hyper.seed, 0xE2));
  double mean = 0, var = 0;
  for (double v : labels) mean += v;
  mean /= static_cast<double>(labels.size());
  for (double v : labels) var += (v - mean) * (v - mean);
  pred.head.label_mean = mean;
  pred.head.label_std = std::max(std::sqrt(var / static_cast<double>(labels.size())), 1e-6);

  const bool frozen = mode == RegMode::frozen;
  pred.encoder.set_trainable(!frozen);
  const auto enc_params = pred.encoder.parameters();
  const auto before = snapshot(enc_params);

  AdamConfig head_cfg;
  head_cfg.lr = hyper.lr;
  std::vector<Var> head_vars;
  for (const auto& p : pred.head.parameters()) head_vars.push_back(p.var);
  Adam<float> opt(head_vars, head_cfg);
  if (!frozen) {
    AdamConfig enc_cfg = head_cfg;
    enc_cfg.weight_decay = hyper.encoder_weight_decay;
    std::vector<Var> enc_vars;
    for (const auto& p : enc_params) enc_vars.push_back(p.var);
    opt.add_group(enc_vars, enc_cfg);
  }

  // Frozen latents never change, so they are computed once.
  Tensor<float> cached;
  if (frozen) {
    std::vector<const Clip*> ptrs;
    for (const auto& c : clips) ptrs.push_back(&c);
    cached = encode_clips(pred.encoder, ptrs);
  }
  const int64_t latent = cfg.latent_dim;

  for (int64_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    const uint64_t epoch_seed = derive_seed(hyper.seed, static_cast<uint64_t>(epoch));
    std::vector<size_t> subset(clips.size());
    for (size_t i = 0; i < subset.size(); ++i) subset[i] = i;
    if (hyper.clips_per_epoch > 0 && static_cast<size_t>(hyper.clips_per_epoch) < subset.size()) {
      std::mt19937_64 rng(derive_seed(epoch_seed, 1));
      std::shuffle(subset.begin(), subset.end(), rng);
      subset.resize(static_cast<size_t>(hyper.clips_per_epoch));
    }
    double loss_sum = 0;
    for (const auto& batch : batch_iter(subset.size(), static_cast<size_t>(hyper.batch), derive_seed(epoch_seed, 2))) {
      opt.zero_grad();
      for (size_t s = 0; s < batch.size(); s += static_cast<size_t>(hyper.micro_batch)) {
        const size_t e = std::min(batch.size(), s + static_cast<size_t>(hyper.micro_batch));
        const auto m = static_cast<int64_t>(e - s);
        Tensor<float> target({m, 1});
        Var z;
        if (frozen) {
          Tensor<float> zb({m, latent});
          for (int64_t i = 0; i < m; ++i) {
            const size_t ci = subset[batch[s + static_cast<size_t>(i)]];
            std::copy(cached.raw() + ci * latent, cached.raw() + (ci + 1) * latent, zb.raw() + i * latent);
          }
          z = Var(std::move(zb));
        } else {
          std::vector<const Clip*> ptrs;
          for (size_t i = s; i < e; ++i) ptrs.push_back(&clips[subset[batch[i]]]);
          z = pred.encoder.forward(Var(stack_clips(ptrs)), NormMode::train);
        }
        for (int64_t i = 0; i < m; ++i) target[i] = static_cast<float>(labels[subset[batch[s + static_cast<size_t>(i)]]]);
        Var loss = mse_loss(pred.head.forward(z), Var(std::move(target)));
        const double value = loss.value().item();
        if (!std::isfinite(value)) throw TrainingDiverged("train_regressor: loss is not finite", epoch);
        loss_sum += value * static_cast<double>(m);
        backward(affine(loss, static_cast<float>(m) / static_cast<float>(batch.size()), 0.0f));
      }
      opt.step();
    }
    const double mean_loss = loss_sum / static_cast<double>(subset.size());
    res.history.push_back(mean_loss);
    if (on_epoch) on_epoch(epoch, mean_loss);
  }
  res.encoder_unchanged = snapshot(enc_params) == before;
  return res;
}

double predict_video_viscosity(std::span<const double> clip_predictions) {
  if (clip_predictions.empty()) throw std::invalid_argument("predict_video_viscosity: no clips");
  double s = 0;
  for (double p : clip_predictions) s += p;
  return s / static_cast<double>(clip_predictions.size());
}

double predict_video_viscosity(ViscosityPredictor& predictor, std::span<const Clip* const> clips) {
  const auto p = predictor.predict(clips);
  return predict_video_viscosity(p);
}

Checkpoint regressor_checkpoint(ViscosityPredictor& predictor, const RegressorConfig& hyper) {
  Checkpoint ckpt;
  store_tensors(ckpt, predictor.encoder.parameters(), predictor.encoder.buffers());
  store_tensors(ckpt, predictor.head.parameters(), {});
  ckpt.metadata["kind"] = "regressor";
  ckpt.metadata["mode"] = to_string(predictor.mode);
  ckpt.metadata["encoder_config"] = predictor.encoder.config().to_json();
  ckpt.metadata["config_fingerprint"] = predictor.encoder.config().fingerprint();
  ckpt.metadata["label_mean"] = predictor.head.label_mean;
  ckpt.metadata["label_std"] = predictor.head.label_std;
  ckpt.metadata["regressor"] = hyper.to_json();
  return ckpt;
}

ViscosityPredictor load_regressor(const Checkpoint& ckpt, const EncoderConfig& expected) {
  if (ckpt.metadata.value("kind", "") != "regressor") throw CheckpointMismatch("checkpoint is not a regressor");
  require_config(ckpt, expected);
  ViscosityPredictor p;
  p.mode = parse_reg_mode(ckpt.metadata.at("mode").get<std::string>());
  p.encoder = Encoder(expected, 0);
  restore_tensors(ckpt, p.encoder.parameters(), p.encoder.buffers());
  const auto hidden = ckpt.metadata.at("regressor").at("hidden").get<std::vector<int64_t>>();
  p.head = MlpHead(expected.latent_dim, hidden, 0);
  restore_tensors(ckpt, p.head.parameters(), {});
  p.head.label_mean = ckpt.metadata.at("label_mean").get<double>();
  p.head.label_std = ckpt.metadata.at("label_std").get<double>();
  return p;
}

ClassificationMetrics evaluate_classification(std::span<const int> clip_pred, std::span<const int> clip_true,
                                              std::span<const int> video_pred, std::span<const int> video_true,
                                              int classes) {
  if (clip_pred.size() != clip_true.size() || video_pred.size() != video_true.size()) {
    throw std::invalid_argument("evaluate: prediction and label counts differ");
  }
  ClassificationMetrics m;
  m.clips = static_cast<int64_t>(clip_pred.size());
  m.videos = static_cast<int64_t>(video_pred.size());
  m.confusion.assign(static_cast<size_t>(classes), std::vector<int64_t>(static_cast<size_t>(classes), 0));
  m.video_confusion = m.confusion;
  auto tally = [classes](std::span<const int> pred, std::span<const int> truth, auto& cm) {
    int64_t hit = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      if (truth[i] < 0 || truth[i] >= classes || pred[i] < 0 || pred[i] >= classes) {
        throw std::out_of_range("evaluate: class index out of range");
      }
      ++cm[truth[i]][pred[i]];
      hit += pred[i] == truth[i];
    }
    return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
  };
  m.datapoint_accuracy = tally(clip_pred, clip_true, m.confusion);
  m.video_accuracy = tally(video_pred, video_true, m.video_confusion);
  return m;
}

nlohmann::json ClassificationMetrics::to_json(const std::vector<std::string>& names) const {
  return {{"task", "classification"},     {"datapoint_accuracy", datapoint_accuracy},
          {"video_accuracy", video_accuracy}, {"test_clips", clips},
          {"test_videos", videos},          {"class_names", names},
          {"confusion_matrix", confusion},  {"video_confusion_matrix", video_confusion}};
}

RegressionMetrics evaluate_regression(std::span<const double> clip_pred, std::span<const double> clip_true,
                                      std::span<const double> video_pred, std::span<const double> video_true) {
  if (clip_pred.size() != clip_true.size() || video_pred.size() != video_true.size()) {
    throw std::invalid_argument("evaluate: prediction and label counts differ");
  }
  RegressionMetrics m;
  m.clips = static_cast<int64_t>(clip_pred.size());
  m.videos = static_cast<int64_t>(video_pred.size());
  std::map<double, std::vector<double>> by_level;
  for (size_t i = 0; i < clip_pred.size(); ++i) {
    m.mae += std::abs(clip_pred[i] - clip_true[i]);
    by_level[clip_true[i]].push_back(clip_pred[i]);
  }
  if (!clip_pred.empty()) m.mae /= static_cast<double>(clip_pred.size());
  for (size_t i = 0; i < video_pred.size(); ++i) m.video_mae += std::abs(video_pred[i] - video_true[i]);
  if (!video_pred.empty()) m.video_mae /= static_cast<double>(video_pred.size());
  for (const auto& [label, preds] : by_level) {
    LevelRow row;
    row.label = label;
    row.count = static_cast<int64_t>(preds.size());
    for (double p : preds) row.mean_prediction += p;
    row.mean_prediction /= static_cast<double>(preds.size());
    for (double p : preds) row.std_prediction += (p - row.mean_prediction) * (p - row.mean_prediction);
    row.std_prediction = std::sqrt(row.std_prediction / static_cast<double>(preds.size()));
    m.levels.push_back(row);
  }
  return m;
}

nlohmann::json RegressionMetrics::to_json() const {
  nlohmann::json levels_json = nlohmann::json::array();
  for (const auto& r : levels) {
    levels_json.push_back({{"label_cP", r.label},
                           {"mean_prediction_cP", r.mean_prediction},
                           {"std_prediction_cP", r.std_prediction},
                           {"clips", r.count}});
  }
  return {{"task", "regression"}, {"mae_cP", mae},        {"video_mae_cP", video_mae},
          {"test_clips", clips},  {"test_videos", videos}, {"levels", levels_json}};
}

void write_level_csv(const std::filesystem::path& path, const RegressionMetrics& metrics) {
  std::string text = "label_cP,mean_prediction_cP,std_prediction_cP\n";
  char buf[128];
  for (const auto& r : metrics.levels) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", r.label, r.mean_prediction, r.std_prediction);
    text += buf;
  }
  write_text_atomic(path, text);
}

}  // namespace vidvisc

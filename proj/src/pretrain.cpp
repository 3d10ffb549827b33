#include "vidvisc/pretrain.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "vidvisc/io_util.hpp"

namespace vidvisc {

void PretrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("pretrain: lr must be positive");
  if (weight_decay < 0) throw std::invalid_argument("pretrain: weight_decay must be non-negative");
  if (batch < 1 || micro_batch < 1) throw std::invalid_argument("pretrain: batch sizes must be positive");
  if (epochs < 0 || clips_per_epoch < 0) throw std::invalid_argument("pretrain: epochs and clips_per_epoch must be >= 0");
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"lr", lr},         {"weight_decay", weight_decay},       {"batch", batch},
          {"micro_batch", micro_batch}, {"epochs", epochs}, {"clips_per_epoch", clips_per_epoch},
          {"augment", augment}, {"seed", seed}};
}

Checkpoint autoencoder_checkpoint(Autoencoder& model) {
  Checkpoint ckpt;
  store_tensors(ckpt, model.parameters(), model.buffers());
  ckpt.metadata["kind"] = "autoencoder";
  ckpt.metadata["encoder_config"] = model.config().to_json();
  ckpt.metadata["config_fingerprint"] = model.config().fingerprint();
  return ckpt;
}

Autoencoder load_autoencoder(const Checkpoint& ckpt, const EncoderConfig& expected) {
  require_config(ckpt, expected);
  Autoencoder model(expected, 0);
  restore_tensors(ckpt, model.parameters(), model.buffers());
  return model;
}

namespace {

// Indices of the clips used in `epoch`: all of them, or a seeded subset.
std::vector<size_t> epoch_subset(size_t n, int64_t limit, uint64_t seed) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  if (limit > 0 && static_cast<size_t>(limit) < n) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<size_t>(limit));
  }
  return idx;
}

}  // namespace

PretrainResult pretrain(std::span<const Clip> clips, const EncoderConfig& cfg, const PretrainConfig& hyper,
                        const EpochCallback& on_epoch) {
  hyper.validate();
  if (clips.empty()) throw std::invalid_argument("pretrain: no training clips");
  PretrainResult res;
  res.model = Autoencoder(cfg, derive_seed(hyper.seed, 0xAE));
  const auto params = res.model.parameters();
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(p.var);
  AdamConfig acfg;
  acfg.lr = hyper.lr;
  acfg.weight_decay = hyper.weight_decay;
  Adam<float> opt(vars, acfg);

  for (int64_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    const uint64_t epoch_seed = derive_seed(hyper.seed, static_cast<uint64_t>(epoch));
    const auto subset = epoch_subset(clips.size(), hyper.clips_per_epoch, derive_seed(epoch_seed, 1));
    double loss_sum = 0;
    for (const auto& batch : batch_iter(subset.size(), static_cast<size_t>(hyper.batch), derive_seed(epoch_seed, 2))) {
      opt.zero_grad();
      for (size_t s = 0; s < batch.size(); s += static_cast<size_t>(hyper.micro_batch)) {
        const size_t e = std::min(batch.size(), s + static_cast<size_t>(hyper.micro_batch));
        std::vector<Clip> views;
        std::vector<const Clip*> ptrs;
        views.reserve(e - s);
        for (size_t i = s; i < e; ++i) {
          const size_t ci = subset[batch[i]];
          views.push_back(hyper.augment ? augment(clips[ci], derive_seed(epoch_seed, 1000 + ci)) : clips[ci]);
        }
        for (const auto& v : views) ptrs.push_back(&v);
        Var x(stack_clips(ptrs));
        Var loss = mse_loss(res.model.reconstruct(x, NormMode::train), x);
        const double value = loss.value().item();
        if (!std::isfinite(value)) throw TrainingDiverged("pretrain: reconstruction loss is not finite", epoch);
        loss_sum += value * static_cast<double>(e - s);
        backward(affine(loss, static_cast<float>(e - s) / static_cast<float>(batch.size()), 0.0f));
      }
      opt.step();
    }
    const double mean = loss_sum / static_cast<double>(subset.size());
    res.history.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }

  res.checkpoint = autoencoder_checkpoint(res.model);
  store_adam(res.checkpoint, opt, params);
  res.checkpoint.metadata["pretrain"] = hyper.to_json();
  res.checkpoint.metadata["epochs_completed"] = res.history.size();
  return res;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<double>& history) {
  std::string text = "epoch,mean_loss\n";
  char buf[64];
  for (size_t i = 0; i < history.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, history[i]);
    text += buf;
  }
  write_text_atomic(path, text);
}

Tensor<float> encode_clips(Encoder& encoder, std::span<const Clip* const> clips, int64_t chunk) {
  const int64_t n = static_cast<int64_t>(clips.size());
  const int64_t latent = encoder.config().latent_dim;
  Tensor<float> out({n, latent});
  NoGradGuard no_grad;
  for (int64_t s = 0; s < n; s += chunk) {
    const int64_t e = std::min(n, s + chunk);
    Var z = encoder.forward(Var(stack_clips(clips.subspan(static_cast<size_t>(s), static_cast<size_t>(e - s)))),
                            NormMode::eval);
    std::copy(z.value().raw(), z.value().raw() + (e - s) * latent, out.raw() + s * latent);
  }
  return out;
}

}  // namespace vidvisc

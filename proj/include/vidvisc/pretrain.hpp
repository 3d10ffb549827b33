#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "vidvisc/autoencoder.hpp"
#include "vidvisc/dataset.hpp"

namespace vidvisc {

struct PretrainConfig {
  double lr = 5e-5;
  double weight_decay = 1e-5;
  int64_t batch = 512;
  // Batches are processed in slices of at most this many clips with gradients
  // accumulated; batch norm statistics are per slice.
  int64_t micro_batch = 32;
  int64_t epochs = 300;
  // When positive, each epoch trains on a fresh seeded subset of this size.
  int64_t clips_per_epoch = 0;
  bool augment = true;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

// Raised when a training loss stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, int64_t epoch)
      : std::runtime_error(what + " at epoch " + std::to_string(epoch)), epoch_(epoch) {}
  int64_t epoch() const { return epoch_; }

 private:
  int64_t epoch_;
};

struct PretrainResult {
  Autoencoder model;
  Checkpoint checkpoint;
  std::vector<double> history;  // mean training loss per epoch
};

using EpochCallback = std::function<void(int64_t epoch, double mean_loss)>;

// Minimises mse(decode(encode(a)), a) over augmented clips a.
PretrainResult pretrain(std::span<const Clip> clips, const EncoderConfig& cfg, const PretrainConfig& hyper,
                        const EpochCallback& on_epoch = {});

// Checkpoint holding the autoencoder's parameters, buffers and config.
Checkpoint autoencoder_checkpoint(Autoencoder& model);
// Rebuilds an autoencoder from a checkpoint; the config must match exactly.
Autoencoder load_autoencoder(const Checkpoint& ckpt, const EncoderConfig& expected);

void write_history_csv(const std::filesystem::path& path, const std::vector<double>& history);

// Eval-mode latents [N,L] for clips, encoded in slices of `chunk`.
Tensor<float> encode_clips(Encoder& encoder, std::span<const Clip* const> clips, int64_t chunk = 32);

}  // namespace vidvisc

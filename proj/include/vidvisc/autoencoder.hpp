#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidvisc/adam.hpp"
#include "vidvisc/checkpoint.hpp"
#include "vidvisc/ops.hpp"

namespace vidvisc {

using Var = Variable<float>;

struct EncoderConfig {
  Extent3 clip_extent{12, 40, 100};
  int64_t latent_dim = 512;
  std::array<int64_t, 3> channels{16, 32, 64};
  std::array<int64_t, 3> kernels{5, 3, 3};
  std::array<int64_t, 3> paddings{0, 1, 1};

  // Extent after the convolution of stage i (before pooling).
  Extent3 conv_extent(int stage) const;
  // Extent after the pooling of stage i.
  Extent3 pooled_extent(int stage) const;
  int64_t flat_size() const;

  // Throws std::invalid_argument if any stage leaves a non-poolable extent.
  void validate() const;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  std::string fingerprint() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct NamedParam {
  std::string path;
  Var var;
};

struct NamedBuffer {
  std::string path;
  Tensor<float>* tensor;
};

struct Conv3dLayer {
  Var weight, bias;
  Extent3 padding{0, 0, 0};
  Var forward(const Var& x) const { return conv3d(x, weight, bias, padding); }
};

struct ConvTranspose3dLayer {
  Var weight, bias;
  Extent3 padding{0, 0, 0};
  Var forward(const Var& x) const { return conv_transpose3d(x, weight, bias, padding); }
};

struct BatchNormLayer {
  Var gamma, beta;
  BatchNormStats<float> stats;
  Var forward(const Var& x, NormMode mode) { return batchnorm3d(x, gamma, beta, stats, mode); }
};

struct LinearLayer {
  Var weight, bias;
  Var forward(const Var& x) const { return linear(x, weight, bias); }
};

// Three (conv -> batchnorm -> relu -> maxpool) stages, flatten, and a linear
// map to the latent vector without activation.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, uint64_t seed);

  // clips [N,1,D,H,W] -> latents [N,L]. `trace`, when given, receives the
  // shape after each stage followed by the flattened shape.
  Var forward(const Var& clips, NormMode mode, std::vector<Shape>* trace = nullptr);

  std::vector<NamedParam> parameters() const;
  std::vector<NamedBuffer> buffers();
  void set_trainable(bool on);
  Encoder clone() const;
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  std::array<Conv3dLayer, 3> conv_;
  std::array<BatchNormLayer, 3> bn_;
  LinearLayer fc_;
};

// Linear expansion with relu, unflatten, three (upsample -> transposed conv ->
// batchnorm -> relu) stages mirroring the encoder, 1x1x1 projection, sigmoid.
class Decoder {
 public:
  Decoder() = default;
  Decoder(const EncoderConfig& cfg, uint64_t seed);

  Var forward(const Var& latents, NormMode mode, std::vector<Shape>* trace = nullptr);

  std::vector<NamedParam> parameters() const;
  std::vector<NamedBuffer> buffers();
  Decoder clone() const;

  // Output projection, exposed so tests can pin its bias.
  Conv3dLayer& projection() { return proj_; }

 private:
  EncoderConfig cfg_;
  LinearLayer fc_;
  std::array<ConvTranspose3dLayer, 3> deconv_;
  std::array<BatchNormLayer, 3> bn_;
  Conv3dLayer proj_;
};

class Autoencoder {
 public:
  Autoencoder() = default;
  Autoencoder(const EncoderConfig& cfg, uint64_t seed);

  Var encode(const Var& clips, NormMode mode) { return encoder_.forward(clips, mode); }
  Var decode(const Var& latents, NormMode mode) { return decoder_.forward(latents, mode); }
  Var reconstruct(const Var& clips, NormMode mode) { return decode(encode(clips, mode), mode); }

  std::vector<NamedParam> parameters() const;
  std::vector<NamedBuffer> buffers();

  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  Decoder& decoder() { return decoder_; }
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  Encoder encoder_;
  Decoder decoder_;
};

// Copies parameter and buffer values into a checkpoint under their paths.
void store_tensors(Checkpoint& ckpt, const std::vector<NamedParam>& params, const std::vector<NamedBuffer>& buffers);
// Restores values by path; every shape must match exactly.
void restore_tensors(const Checkpoint& ckpt, const std::vector<NamedParam>& params,
                     const std::vector<NamedBuffer>& buffers);

// Optimizer moments are stored as "adam.m/<path>" and "adam.v/<path>".
void store_adam(Checkpoint& ckpt, const Adam<float>& opt, const std::vector<NamedParam>& params);
void restore_adam(const Checkpoint& ckpt, Adam<float>& opt, const std::vector<NamedParam>& params);

// Fails with CheckpointMismatch naming both fingerprints.
void require_config(const Checkpoint& ckpt, const EncoderConfig& expected);

}  // namespace vidvisc

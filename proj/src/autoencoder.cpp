#include "vidvisc/autoencoder.hpp"

#include <cmath>
#include <random>

namespace vidvisc {

Extent3 EncoderConfig::conv_extent(int stage) const {
  Extent3 in = stage == 0 ? clip_extent : pooled_extent(stage - 1);
  Extent3 out{};
  for (int a = 0; a < 3; ++a) out[a] = in[a] - kernels[stage] + 1 + 2 * paddings[stage];
  return out;
}

Extent3 EncoderConfig::pooled_extent(int stage) const {
  Extent3 c = conv_extent(stage);
  return {c[0] / 2, c[1] / 2, c[2] / 2};
}

int64_t EncoderConfig::flat_size() const {
  const Extent3 e = pooled_extent(2);
  return channels[2] * e[0] * e[1] * e[2];
}

void EncoderConfig::validate() const {
  if (latent_dim < 1) throw std::invalid_argument("encoder: latent_dim must be positive");
  for (int s = 0; s < 3; ++s) {
    if (channels[s] < 1 || kernels[s] < 1 || paddings[s] < 0) {
      throw std::invalid_argument("encoder: stage " + std::to_string(s + 1) + " has invalid channels/kernel/padding");
    }
    const Extent3 c = conv_extent(s);
    for (int a = 0; a < 3; ++a) {
      if (c[a] < 2) {
        throw std::invalid_argument("encoder: stage " + std::to_string(s + 1) + " conv output " +
                                    shape_str({c[0], c[1], c[2]}) + " cannot be pooled");
      }
    }
  }
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"clip_extent", clip_extent}, {"latent_dim", latent_dim}, {"channels", channels},
          {"kernels", kernels},         {"paddings", paddings}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.clip_extent = j.at("clip_extent").get<Extent3>();
  c.latent_dim = j.at("latent_dim").get<int64_t>();
  c.channels = j.at("channels").get<std::array<int64_t, 3>>();
  c.kernels = j.at("kernels").get<std::array<int64_t, 3>>();
  c.paddings = j.at("paddings").get<std::array<int64_t, 3>>();
  return c;
}

std::string EncoderConfig::fingerprint() const { return hex64(fnv1a64(to_json().dump())); }

namespace {

Var uniform_param(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  return Var(Tensor<float>::uniform(std::move(shape), -bound, bound, rng), true);
}

Var zero_param(Shape shape) { return Var(Tensor<float>::zeros(std::move(shape)), true); }

BatchNormLayer make_bn(int64_t channels) {
  return BatchNormLayer{Var(Tensor<float>::ones({channels}), true), zero_param({channels}),
                        BatchNormStats<float>(channels)};
}

Var deep_copy(const Var& v) { return Var(v.value(), v.requires_grad()); }

Conv3dLayer copy_layer(const Conv3dLayer& l) { return {deep_copy(l.weight), deep_copy(l.bias), l.padding}; }
ConvTranspose3dLayer copy_layer(const ConvTranspose3dLayer& l) {
  return {deep_copy(l.weight), deep_copy(l.bias), l.padding};
}
LinearLayer copy_layer(const LinearLayer& l) { return {deep_copy(l.weight), deep_copy(l.bias)}; }
BatchNormLayer copy_layer(const BatchNormLayer& l) { return {deep_copy(l.gamma), deep_copy(l.beta), l.stats}; }

Extent3 cube(int64_t k) { return {k, k, k}; }

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  int64_t in_ch = 1;
  for (int s = 0; s < 3; ++s) {
    const int64_t k = cfg_.kernels[s];
    conv_[s] = Conv3dLayer{uniform_param({cfg_.channels[s], in_ch, k, k, k}, in_ch * k * k * k, rng),
                           zero_param({cfg_.channels[s]}), cube(cfg_.paddings[s])};
    bn_[s] = make_bn(cfg_.channels[s]);
    in_ch = cfg_.channels[s];
  }
  fc_ = LinearLayer{uniform_param({cfg_.flat_size(), cfg_.latent_dim}, cfg_.flat_size(), rng),
                    zero_param({cfg_.latent_dim})};
}

Var Encoder::forward(const Var& clips, NormMode mode, std::vector<Shape>* trace) {
  const auto [d, h, w] = cfg_.clip_extent;
  if (clips.rank() != 5 || clips.dim(1) != 1 || clips.dim(2) != d || clips.dim(3) != h || clips.dim(4) != w) {
    throw ShapeError("encoder expects clips [N,1," + std::to_string(d) + "," + std::to_string(h) + "," +
                     std::to_string(w) + "], got " + shape_str(clips.shape()));
  }
  Var x = clips;
  for (int s = 0; s < 3; ++s) {
    x = maxpool3d(relu(bn_[s].forward(conv_[s].forward(x), mode)));
    if (trace) trace->push_back(x.shape());
  }
  x = reshape(x, {x.dim(0), cfg_.flat_size()});
  if (trace) trace->push_back(x.shape());
  return fc_.forward(x);
}

std::vector<NamedParam> Encoder::parameters() const {
  std::vector<NamedParam> out;
  for (int s = 0; s < 3; ++s) {
    const std::string i = std::to_string(s + 1);
    out.push_back({"encoder.conv" + i + ".weight", conv_[s].weight});
    out.push_back({"encoder.conv" + i + ".bias", conv_[s].bias});
    out.push_back({"encoder.bn" + i + ".gamma", bn_[s].gamma});
    out.push_back({"encoder.bn" + i + ".beta", bn_[s].beta});
  }
  out.push_back({"encoder.fc.weight", fc_.weight});
  out.push_back({"encoder.fc.bias", fc_.bias});
  return out;
}

std::vector<NamedBuffer> Encoder::buffers() {
  std::vector<NamedBuffer> out;
  for (int s = 0; s < 3; ++s) {
    const std::string i = std::to_string(s + 1);
    out.push_back({"encoder.bn" + i + ".running_mean", &bn_[s].stats.running_mean});
    out.push_back({"encoder.bn" + i + ".running_var", &bn_[s].stats.running_var});
  }
  return out;
}

void Encoder::set_trainable(bool on) {
  for (auto& p : parameters()) p.var.set_requires_grad(on);
}

Encoder Encoder::clone() const {
  Encoder e;
  e.cfg_ = cfg_;
  for (int s = 0; s < 3; ++s) {
    e.conv_[s] = copy_layer(conv_[s]);
    e.bn_[s] = copy_layer(bn_[s]);
  }
  e.fc_ = copy_layer(fc_);
  return e;
}

Decoder::Decoder(const EncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  fc_ = LinearLayer{uniform_param({cfg_.latent_dim, cfg_.flat_size()}, cfg_.latent_dim, rng),
                    zero_param({cfg_.flat_size()})};
  for (int s = 0; s < 3; ++s) {
    const int e = 2 - s;
    const int64_t in_ch = cfg_.channels[e];
    const int64_t out_ch = cfg_.channels[e > 0 ? e - 1 : 0];
    const int64_t k = cfg_.kernels[e];
    deconv_[s] = ConvTranspose3dLayer{uniform_param({in_ch, out_ch, k, k, k}, in_ch * k * k * k, rng),
                                      zero_param({out_ch}), cube(cfg_.paddings[e])};
    bn_[s] = make_bn(out_ch);
  }
  proj_ = Conv3dLayer{uniform_param({1, cfg_.channels[0], 1, 1, 1}, cfg_.channels[0], rng), zero_param({1}),
                      {0, 0, 0}};
}

Var Decoder::forward(const Var& latents, NormMode mode, std::vector<Shape>* trace) {
  if (latents.rank() != 2 || latents.dim(1) != cfg_.latent_dim) {
    throw ShapeError("decoder expects latents [N," + std::to_string(cfg_.latent_dim) + "], got " +
                     shape_str(latents.shape()));
  }
  const Extent3 b = cfg_.pooled_extent(2);
  Var x = relu(fc_.forward(latents));
  x = reshape(x, {latents.dim(0), cfg_.channels[2], b[0], b[1], b[2]});
  if (trace) trace->push_back(x.shape());
  for (int s = 0; s < 3; ++s) {
    x = upsample_trilinear(x, cfg_.conv_extent(2 - s));
    if (trace) trace->push_back(x.shape());
    x = relu(bn_[s].forward(deconv_[s].forward(x), mode));
  }
  if (trace) trace->push_back(x.shape());
  x = sigmoid(proj_.forward(x));
  if (trace) trace->push_back(x.shape());
  return x;
}

std::vector<NamedParam> Decoder::parameters() const {
  std::vector<NamedParam> out;
  out.push_back({"decoder.fc.weight", fc_.weight});
  out.push_back({"decoder.fc.bias", fc_.bias});
  for (int s = 0; s < 3; ++s) {
    const std::string i = std::to_string(s + 1);
    out.push_back({"decoder.deconv" + i + ".weight", deconv_[s].weight});
    out.push_back({"decoder.deconv" + i + ".bias", deconv_[s].bias});
    out.push_back({"decoder.bn" + i + ".gamma", bn_[s].gamma});
    out.push_back({"decoder.bn" + i + ".beta", bn_[s].beta});
  }
  out.push_back({"decoder.proj.weight", proj_.weight});
  out.push_back({"decoder.proj.bias", proj_.bias});
  return out;
}

std::vector<NamedBuffer> Decoder::buffers() {
  std::vector<NamedBuffer> out;
  for (int s = 0; s < 3; ++s) {
    const std::string i = std::to_string(s + 1);
    out.push_back({"decoder.bn" + i + ".running_mean", &bn_[s].stats.running_mean});
    out.push_back({"decoder.bn" + i + ".running_var", &bn_[s].stats.running_var});
  }
  return out;
}

Decoder Decoder::clone() const {
  Decoder d;
  d.cfg_ = cfg_;
  d.fc_ = copy_layer(fc_);
  for (int s = 0; s < 3; ++s) {
    d.deconv_[s] = copy_layer(deconv_[s]);
    d.bn_[s] = copy_layer(bn_[s]);
  }
  d.proj_ = copy_layer(proj_);
  return d;
}

Autoencoder::Autoencoder(const EncoderConfig& cfg, uint64_t seed)
    : cfg_(cfg), encoder_(cfg, derive_seed(seed, 1)), decoder_(cfg, derive_seed(seed, 2)) {}

std::vector<NamedParam> Autoencoder::parameters() const {
  auto p = encoder_.parameters();
  auto d = decoder_.parameters();
  p.insert(p.end(), d.begin(), d.end());
  return p;
}

std::vector<NamedBuffer> Autoencoder::buffers() {
  auto b = encoder_.buffers();
  auto d = decoder_.buffers();
  b.insert(b.end(), d.begin(), d.end());
  return b;
}

void store_tensors(Checkpoint& ckpt, const std::vector<NamedParam>& params, const std::vector<NamedBuffer>& buffers) {
  for (const auto& p : params) ckpt.put(p.path, p.var.value());
  for (const auto& b : buffers) ckpt.put(b.path, *b.tensor);
}

namespace {

void restore_into(const Checkpoint& ckpt, const std::string& path, Tensor<float>& dst) {
  const auto& src = ckpt.f32(path);
  if (src.shape() != dst.shape()) {
    throw CheckpointMismatch("checkpoint tensor '" + path + "' has shape " + shape_str(src.shape()) +
                             ", model expects " + shape_str(dst.shape()));
  }
  dst = src;
}

}  // namespace

void restore_tensors(const Checkpoint& ckpt, const std::vector<NamedParam>& params,
                     const std::vector<NamedBuffer>& buffers) {
  for (auto p : params) restore_into(ckpt, p.path, p.var.mutable_value());
  for (const auto& b : buffers) restore_into(ckpt, b.path, *b.tensor);
}

void store_adam(Checkpoint& ckpt, const Adam<float>& opt, const std::vector<NamedParam>& params) {
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& m = opt.moments(i);
    const Shape& s = params[i].var.shape();
    ckpt.put("adam.m/" + params[i].path, Tensor<float>(s, m.first));
    ckpt.put("adam.v/" + params[i].path, Tensor<float>(s, m.second));
  }
  ckpt.metadata["adam_step_count"] = opt.step_count();
}

void restore_adam(const Checkpoint& ckpt, Adam<float>& opt, const std::vector<NamedParam>& params) {
  for (size_t i = 0; i < params.size(); ++i) {
    auto& m = opt.moments(i);
    m.first = ckpt.f32("adam.m/" + params[i].path).storage();
    m.second = ckpt.f32("adam.v/" + params[i].path).storage();
    if (m.first.size() != params[i].var.size() || m.second.size() != params[i].var.size()) {
      throw CheckpointMismatch("optimizer state for '" + params[i].path + "' has the wrong size");
    }
  }
  opt.set_step_count(ckpt.metadata.value("adam_step_count", int64_t{0}));
}

void require_config(const Checkpoint& ckpt, const EncoderConfig& expected) {
  if (!ckpt.metadata.contains("encoder_config")) {
    throw CheckpointMismatch("checkpoint carries no encoder_config (expected fingerprint " + expected.fingerprint() +
                             ")");
  }
  const auto found = EncoderConfig::from_json(ckpt.metadata.at("encoder_config"));
  if (!(found == expected)) {
    throw CheckpointMismatch("encoder config mismatch: checkpoint fingerprint " + found.fingerprint() +
                             " (latent_dim " + std::to_string(found.latent_dim) + "), expected fingerprint " +
                             expected.fingerprint() + " (latent_dim " + std::to_string(expected.latent_dim) + ")");
  }
}

}  // namespace vidvisc

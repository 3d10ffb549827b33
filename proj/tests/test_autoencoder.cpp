#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "vidvisc/autoencoder.hpp"
#include "vidvisc/io_util.hpp"
#include "vidvisc/pretrain.hpp"

using namespace vidvisc;
namespace fs = std::filesystem;

namespace {

// Small geometry that still passes through every stage: 12x12x20 clips.
EncoderConfig tiny_config() {
  EncoderConfig c;
  c.clip_extent = {12, 12, 20};
  c.latent_dim = 16;
  c.channels = {4, 6, 8};
  return c;
}

std::vector<Clip> random_clips(const EncoderConfig& cfg, size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Clip> out;
  for (size_t i = 0; i < n; ++i) {
    Clip c;
    c.depth = cfg.clip_extent[0];
    c.height = cfg.clip_extent[1];
    c.width = cfg.clip_extent[2];
    c.pixels.resize(static_cast<size_t>(c.size()));
    // A tilted surface per clip, so there is structure to learn.
    const int64_t level = 3 + static_cast<int64_t>(rng() % 6);
    for (int64_t t = 0; t < c.depth; ++t)
      for (int64_t r = 0; r < c.height; ++r)
        for (int64_t w = 0; w < c.width; ++w)
          c.pixels[static_cast<size_t>((t * c.height + r) * c.width + w)] = r >= level + (w * (t % 3)) / 20;
    out.push_back(std::move(c));
  }
  return out;
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("vidvisc_ae_" + name); }

}  // namespace

TEST(EncoderConfig, DefaultBottleneckAudit) {
  const EncoderConfig cfg;
  EXPECT_EQ(cfg.conv_extent(0), (Extent3{8, 36, 96}));
  EXPECT_EQ(cfg.pooled_extent(0), (Extent3{4, 18, 48}));
  EXPECT_EQ(cfg.pooled_extent(1), (Extent3{2, 9, 24}));
  EXPECT_EQ(cfg.pooled_extent(2), (Extent3{1, 4, 12}));
  EXPECT_EQ(cfg.flat_size(), 3072);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(EncoderConfig, RejectsUnpoolableGeometry) {
  EncoderConfig cfg;
  cfg.clip_extent = {6, 40, 100};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_THROW(Encoder(cfg, 1), std::invalid_argument);
}

TEST(EncoderConfig, JsonRoundTripAndFingerprint) {
  EncoderConfig a;
  const EncoderConfig b = EncoderConfig::from_json(a.to_json());
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(b.latent_dim, 512);
  EncoderConfig c;
  c.latent_dim = 256;
  EXPECT_NE(a.fingerprint(), c.fingerprint());
}

TEST(Autoencoder, StagewiseShapes) {
  Autoencoder ae(EncoderConfig{}, 3);
  std::vector<Shape> enc, dec;
  Var x(Tensor<float>::zeros({1, 1, 12, 40, 100}));
  NoGradGuard no_grad;
  Var z = ae.encoder().forward(x, NormMode::eval, &enc);
  ASSERT_EQ(enc.size(), 4u);
  EXPECT_EQ(enc[0], (Shape{1, 16, 4, 18, 48}));
  EXPECT_EQ(enc[1], (Shape{1, 32, 2, 9, 24}));
  EXPECT_EQ(enc[2], (Shape{1, 64, 1, 4, 12}));
  EXPECT_EQ(enc[3], (Shape{1, 3072}));
  EXPECT_EQ(z.shape(), (Shape{1, 512}));
  Var y = ae.decoder().forward(z, NormMode::eval, &dec);
  ASSERT_EQ(dec.size(), 6u);
  EXPECT_EQ(dec[0], (Shape{1, 64, 1, 4, 12}));
  EXPECT_EQ(dec[1], (Shape{1, 64, 2, 9, 24}));
  EXPECT_EQ(dec[2], (Shape{1, 32, 4, 18, 48}));
  EXPECT_EQ(dec[3], (Shape{1, 16, 8, 36, 96}));
  EXPECT_EQ(dec[4], (Shape{1, 16, 12, 40, 100}));
  EXPECT_EQ(dec[5], (Shape{1, 1, 12, 40, 100}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 12, 40, 100}));
}

TEST(Autoencoder, RejectsWrongShapes) {
  Autoencoder ae(tiny_config(), 1);
  EXPECT_THROW(ae.encode(Var(Tensor<float>::zeros({1, 1, 12, 12, 21})), NormMode::eval), ShapeError);
  EXPECT_THROW(ae.decode(Var(Tensor<float>::zeros({1, 15})), NormMode::eval), ShapeError);
}

TEST(Autoencoder, OutputsStayInsideUnitInterval) {
  Autoencoder ae(tiny_config(), 2);
  std::mt19937_64 rng(4);
  NoGradGuard no_grad;
  for (float scale : {1.0f, 100.0f, 1e4f}) {
    Var z(Tensor<float>::uniform({3, 16}, -scale, scale, rng));
    const Tensor<float> y = ae.decode(z, NormMode::eval).value();
    for (float v : y.storage()) {
      EXPECT_GT(v, 0.0f);
      EXPECT_LT(v, 1.0f);
    }
  }
}

TEST(Autoencoder, ZeroLatentWithZeroBiasesGivesHalfFrames) {
  Autoencoder ae(tiny_config(), 5);
  // Fresh batchnorm stats are (0, 1) and beta starts at 0, so zero biases
  // carry a zero latent through every layer to sigmoid(0).
  for (auto& p : ae.decoder().parameters()) {
    if (p.path.ends_with(".bias")) {
      Var v = p.var;
      for (auto& x : v.mutable_value().storage()) x = 0;
    }
  }
  NoGradGuard no_grad;
  const Tensor<float> y = ae.decode(Var(Tensor<float>::zeros({2, 16})), NormMode::eval).value();
  for (float v : y.storage()) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(Autoencoder, IdenticalClipsGiveIdenticalLatents) {
  const auto cfg = tiny_config();
  Autoencoder ae(cfg, 6);
  auto clips = random_clips(cfg, 1, 1);
  std::vector<const Clip*> two{&clips[0], &clips[0]};
  const Tensor<float> z = encode_clips(ae.encoder(), two);
  for (int64_t j = 0; j < 16; ++j) EXPECT_EQ(z[j], z[16 + j]);
}

TEST(Autoencoder, SeededConstructionIsDeterministic) {
  Autoencoder a(tiny_config(), 9), b(tiny_config(), 9), c(tiny_config(), 10);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(pa[i].var.value(), pb[i].var.value()));
    any_diff = any_diff || !bitwise_equal(pa[i].var.value(), pc[i].var.value());
  }
  EXPECT_TRUE(any_diff);
}

TEST(Checkpoint, SaveLoadIsBitwise) {
  Autoencoder ae(EncoderConfig{}, 11);
  const Checkpoint ckpt = autoencoder_checkpoint(ae);
  const fs::path p = temp_file("roundtrip.v2vc");
  save_checkpoint(p, ckpt);
  const Checkpoint back = load_checkpoint(p);
  EXPECT_TRUE(bitwise_equal(ckpt, back));
  const fs::path p2 = temp_file("roundtrip2.v2vc");
  save_checkpoint(p2, back);
  EXPECT_EQ(read_file(p), read_file(p2));
  Autoencoder restored = load_autoencoder(back, EncoderConfig{});
  const auto a = ae.parameters(), b = restored.parameters();
  for (size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i].var.value(), b[i].var.value())) << a[i].path;
}

TEST(Checkpoint, LatentMismatchIsRejected) {
  Autoencoder ae(EncoderConfig{}, 12);
  const Checkpoint ckpt = autoencoder_checkpoint(ae);
  EncoderConfig small;
  small.latent_dim = 256;
  try {
    load_autoencoder(ckpt, small);
    FAIL();
  } catch (const CheckpointMismatch& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(EncoderConfig{}.fingerprint()), std::string::npos);
    EXPECT_NE(msg.find(small.fingerprint()), std::string::npos);
  }
}

TEST(Checkpoint, CorruptInputsReportOffsets) {
  Autoencoder ae(tiny_config(), 13);
  const auto bytes = encode_checkpoint(autoencoder_checkpoint(ae));
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  auto magic = bytes;
  magic[1] = 'X';
  try {
    decode_checkpoint(magic);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  auto version = bytes;
  version[4] = 9;
  try {
    decode_checkpoint(version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Checkpoint, OptimizerStateRoundTrips) {
  const auto cfg = tiny_config();
  const auto clips = random_clips(cfg, 4, 2);
  PretrainConfig hyper;
  hyper.epochs = 1;
  hyper.batch = 4;
  hyper.lr = 1e-3;
  auto res = pretrain(clips, cfg, hyper);
  const auto params = res.model.parameters();
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(p.var);
  Adam<float> opt(vars);
  restore_adam(res.checkpoint, opt, params);
  EXPECT_EQ(opt.step_count(), 1);
  Checkpoint again = autoencoder_checkpoint(res.model);
  store_adam(again, opt, params);
  for (const auto& p : params) {
    EXPECT_TRUE(bitwise_equal(again.f32("adam.m/" + p.path), res.checkpoint.f32("adam.m/" + p.path)));
    EXPECT_TRUE(bitwise_equal(again.f32("adam.v/" + p.path), res.checkpoint.f32("adam.v/" + p.path)));
  }
}

TEST(Pretrain, ZeroEpochsReturnsInitialisation) {
  const auto cfg = tiny_config();
  const auto clips = random_clips(cfg, 3, 3);
  PretrainConfig hyper;
  hyper.epochs = 0;
  hyper.seed = 21;
  auto res = pretrain(clips, cfg, hyper);
  EXPECT_TRUE(res.history.empty());
  Autoencoder fresh(cfg, derive_seed(21, 0xAE));
  const Checkpoint expect = autoencoder_checkpoint(fresh);
  for (const auto& [name, t] : expect.tensors) {
    EXPECT_TRUE(bitwise_equal(std::get<Tensor<float>>(t), res.checkpoint.f32(name))) << name;
  }
}

TEST(Pretrain, DeterministicAndDecreasing) {
  const auto cfg = tiny_config();
  const auto clips = random_clips(cfg, 16, 4);
  PretrainConfig hyper;
  hyper.epochs = 12;
  hyper.batch = 8;
  hyper.micro_batch = 4;
  hyper.lr = 3e-3;
  hyper.seed = 5;
  const auto a = pretrain(clips, cfg, hyper);
  const auto b = pretrain(clips, cfg, hyper);
  ASSERT_EQ(a.history.size(), 12u);
  EXPECT_EQ(a.history, b.history);
  EXPECT_LT(a.history.back(), 0.8 * a.history.front());
}

TEST(Pretrain, DivergenceReportsEpoch) {
  const auto cfg = tiny_config();
  const auto clips = random_clips(cfg, 8, 5);
  PretrainConfig hyper;
  hyper.epochs = 50;
  hyper.batch = 4;
  hyper.lr = 3e38;  // batchnorm hides plain large weights; this overflows them
  try {
    pretrain(clips, cfg, hyper);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_GE(e.epoch(), 1);
    EXPECT_LE(e.epoch(), 50);
  }
}

TEST(Pretrain, HistoryCsv) {
  const fs::path p = temp_file("history.csv");
  write_history_csv(p, {0.5, 0.25});
  const auto bytes = read_file(p);
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), "epoch,mean_loss\n1,0.5\n2,0.25\n");
}

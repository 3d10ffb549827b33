#include "vidvisc/slosh.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "vidvisc/io_util.hpp"

namespace vidvisc {

void SloshParams::validate(int64_t height) const {
  if (!(fill_fraction > 0 && fill_fraction < 1)) throw std::invalid_argument("slosh: fill_fraction must be in (0,1)");
  if (amplitude < 0 || gamma < 0) throw std::invalid_argument("slosh: amplitude and gamma must be non-negative");
  if (noise_level < 0 || noise_level > 0.05) throw std::invalid_argument("slosh: noise_level must be in [0,0.05]");
  const double h = static_cast<double>(height);
  if (fill_fraction * h + amplitude >= h || fill_fraction * h - amplitude <= 0) {
    throw std::invalid_argument("slosh: surface (fill " + std::to_string(fill_fraction) + ", amplitude " +
                                std::to_string(amplitude) + ") leaves a frame of height " + std::to_string(height));
  }
}

double viscosity_to_damping(double mu_cP) {
  if (!(mu_cP > 0)) throw std::invalid_argument("viscosity must be positive, got " + std::to_string(mu_cP));
  return 0.005 + 0.012 * std::sqrt(mu_cP);
}

MaskVideo render_mask_video(const SloshParams& p, int64_t frames, int64_t height, int64_t width) {
  if (frames < 1 || height < 8 || width < 8) throw std::invalid_argument("render: need D >= 1 and H, W >= 8");
  p.validate(height);
  MaskVideo v = MaskVideo::blank(frames, height, width);
  std::mt19937_64 rng(p.seed);
  std::bernoulli_distribution flip(p.noise_level);
  const double level = p.fill_fraction * static_cast<double>(height);
  std::vector<double> mode(static_cast<size_t>(width));
  for (int64_t c = 0; c < width; ++c) mode[c] = std::cos(std::numbers::pi * c / width);

  for (int64_t t = 0; t < frames; ++t) {
    const double a = p.amplitude * std::exp(-p.gamma * t) * std::cos(p.omega * t + p.phase);
    for (int64_t c = 0; c < width; ++c) {
      const double y = level + a * mode[c];
      for (int64_t b = 0; b < height; ++b) {
        const double centre = b + 0.5;
        uint8_t lit = centre < y;
        if (p.noise_level > 0 && std::abs(centre - y) < 2.0 && flip(rng)) lit ^= 1;
        v.at(t, height - 1 - b, c) = lit;
      }
    }
  }
  return v;
}

void GenerateSpec::validate() const {
  if (kind == LabelKind::class_name && classes.size() < 2) throw std::invalid_argument("gen: need at least 2 classes");
  if (kind == LabelKind::viscosity_cP && viscosities_cP.empty()) throw std::invalid_argument("gen: no viscosity levels");
  if (videos_per_label < 1) throw std::invalid_argument("gen: videos_per_label must be >= 1");
  if (test_videos_per_label < 0 || test_videos_per_label >= videos_per_label) {
    throw std::invalid_argument("gen: test_videos_per_label must leave at least one training video");
  }
  if (jitter < 0 || jitter >= 1) throw std::invalid_argument("gen: jitter must be in [0,1)");
  for (double mu : viscosities_cP) viscosity_to_damping(mu);
}

std::vector<double> log_spaced_levels(int count, double lo, double hi) {
  if (count < 1 || !(lo > 0) || !(hi >= lo)) throw std::invalid_argument("log_spaced_levels: bad range");
  std::vector<double> out;
  for (int i = 0; i < count; ++i) {
    const double f = count == 1 ? 0.0 : static_cast<double>(i) / (count - 1);
    out.push_back(lo * std::pow(hi / lo, f));
  }
  return out;
}

namespace {

std::string format_level(double mu) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", mu);
  return buf;
}

}  // namespace

SloshParams video_params(const GenerateSpec& spec, size_t label_index, int k) {
  std::mt19937_64 rng(derive_seed(spec.master_seed, label_index * 1000003ULL + static_cast<uint64_t>(k)));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  SloshParams p;
  if (spec.kind == LabelKind::class_name) {
    const auto& c = spec.classes.at(label_index);
    p.gamma = c.gamma;
    p.omega = c.omega;
    p.fill_fraction = c.fill;
  } else {
    p.gamma = viscosity_to_damping(std::stod(format_level(spec.viscosities_cP.at(label_index))));
    p.omega = spec.omega;
    p.fill_fraction = spec.fill;
  }
  p.amplitude = spec.amplitude_fraction * static_cast<double>(spec.height) * (1 + spec.jitter * unit(rng));
  p.fill_fraction *= 1 + spec.jitter * unit(rng);
  p.phase = spec.jitter * 2 * std::numbers::pi * unit(rng);
  p.noise_level = spec.noise_level;
  p.seed = rng();
  return p;
}

Manifest generate_dataset(const GenerateSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  const size_t labels = spec.kind == LabelKind::class_name ? spec.classes.size() : spec.viscosities_cP.size();
  Manifest m;
  m.base_dir = out_dir;
  for (size_t li = 0; li < labels; ++li) {
    const std::string label =
        spec.kind == LabelKind::class_name ? spec.classes[li].name : format_level(spec.viscosities_cP[li]);
    for (int k = 0; k < spec.videos_per_label; ++k) {
      MaskVideo v = render_mask_video(video_params(spec, li, k), spec.frames, spec.height, spec.width);
      v.fps = spec.fps;
      char name[64];
      std::snprintf(name, sizeof name, "L%02zu_v%03d.mvid", li, k);
      const std::string rel = std::string("videos/") + name;
      write_mvid(out_dir / rel, v);
      m.entries.push_back({rel, spec.kind, label, k >= spec.videos_per_label - spec.test_videos_per_label ? "test" : "train"});
    }
  }
  write_manifest(out_dir / "manifest.tsv", m);
  return m;
}

}  // namespace vidvisc

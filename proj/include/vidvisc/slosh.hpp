#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidvisc/dataset.hpp"

namespace vidvisc {

// Surface height above the bottom row, in pixels:
//   y(c, t) = fill*H + A * exp(-gamma t) * cos(pi c / W) * cos(omega t + phase)
struct SloshParams {
  double fill_fraction = 0.5;
  double amplitude = 0;  // pixels
  double omega = 0.3;    // rad/frame
  double gamma = 0;      // 1/frame
  double phase = 0;
  double noise_level = 0;  // pixel flip rate inside the surface band
  uint64_t seed = 0;

  // Throws std::invalid_argument when the surface could leave an H-row frame.
  void validate(int64_t height) const;
};

// gamma = 0.005 + 0.012 sqrt(mu); mu in centipoise, gamma per frame at 30 fps.
double viscosity_to_damping(double mu_cP);

// A pixel is lit when its centre lies below the surface. Noise flips pixels
// within 2 pixels of the surface with probability noise_level.
MaskVideo render_mask_video(const SloshParams& params, int64_t frames, int64_t height, int64_t width);

struct FluidClass {
  std::string name;
  double gamma = 0, omega = 0, fill = 0;
};

struct GenerateSpec {
  LabelKind kind = LabelKind::class_name;
  std::vector<FluidClass> classes;     // class mode
  std::vector<double> viscosities_cP;  // regression mode
  int videos_per_label = 10;
  int test_videos_per_label = 2;
  int64_t frames = 150, height = 96, width = 128;
  uint32_t fps = 30;
  double amplitude_fraction = 0.2;  // of H
  double omega = 0.3;               // regression mode
  double fill = 0.45;               // regression mode
  double noise_level = 0.01;
  double jitter = 0.1;  // relative jitter of amplitude, fill and phase
  uint64_t master_seed = 0;

  void validate() const;
};

// `count` levels log-spaced over [lo, hi] cP.
std::vector<double> log_spaced_levels(int count, double lo = 1.0, double hi = 250.0);

// Per-video parameters for label `label_index`, video `k`.
SloshParams video_params(const GenerateSpec& spec, size_t label_index, int k);

// Writes one MVID per video under out_dir/videos and out_dir/manifest.tsv.
Manifest generate_dataset(const GenerateSpec& spec, const std::filesystem::path& out_dir);

}  // namespace vidvisc

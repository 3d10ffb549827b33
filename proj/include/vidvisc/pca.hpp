#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "vidvisc/autoencoder.hpp"
#include "vidvisc/dataset.hpp"

namespace vidvisc {

struct PcaModel {
  Tensor<double> mean;        // [L]
  Tensor<double> components;  // [k,L], orthonormal rows
  std::vector<double> explained_variance;
  double total_variance = 0;

  int64_t k() const { return components.dim(0); }
  int64_t dim() const { return components.dim(1); }
};

// Eigendecomposition of the sample covariance (N - 1 normalisation). Each
// component is oriented so its largest-magnitude entry is positive.
PcaModel pca_fit(const Tensor<double>& latents, int64_t k);

// (x - mean) * components^T -> [N,k].
Tensor<double> pca_project(const PcaModel& model, const Tensor<double>& latents);

nlohmann::json pca_to_json(const PcaModel& model);
PcaModel pca_from_json(const nlohmann::json& j);

struct Trajectory {
  std::vector<int64_t> start_frames;
  Tensor<double> points;  // [n,2]
};

// Encodes every sliding-window clip of `video` in order and projects it onto
// the first two components.
Trajectory compute_trajectory(Encoder& encoder, const MaskVideo& video, const PcaModel& pca, int64_t depth = 12);

// Writes CSV `start_frame,pc1,pc2` and a JSON summary next to it
// (`<path>.json`: explained_variance, n_points).
Trajectory trajectory_export(Encoder& encoder, const MaskVideo& video, const PcaModel& pca,
                             const std::filesystem::path& path, int64_t depth = 12);

// Mean distance between consecutive points, and between `pairs` random pairs
// of distinct points drawn with `seed`.
double mean_step_distance(const Tensor<double>& points);
double mean_random_pair_distance(const Tensor<double>& points, int64_t pairs, uint64_t seed);

}  // namespace vidvisc

#include "vidvisc/pca.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <random>

#include "vidvisc/io_util.hpp"
#include "vidvisc/pretrain.hpp"

namespace vidvisc {

namespace {
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapD = Eigen::Map<const MatD>;
}  // namespace

PcaModel pca_fit(const Tensor<double>& latents, int64_t k) {
  if (latents.rank() != 2) throw ShapeError("pca_fit: latents must be [N,L], got " + shape_str(latents.shape()));
  const int64_t n = latents.dim(0), l = latents.dim(1);
  if (n < 2) throw std::invalid_argument("pca_fit: need at least two samples");
  if (k < 1 || k > std::min(n - 1, l)) {
    throw std::invalid_argument("pca_fit: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(std::min(n - 1, l)) + "]");
  }
  CMapD x(latents.raw(), n, l);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const MatD centered = x.rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("pca_fit: eigendecomposition failed");

  PcaModel m;
  m.mean = Tensor<double>({l});
  std::copy(mu.data(), mu.data() + l, m.mean.raw());
  m.components = Tensor<double>({k, l});
  m.total_variance = cov.trace();
  // Eigen sorts eigenvalues ascending.
  for (int64_t c = 0; c < k; ++c) {
    const Eigen::Index col = l - 1 - c;
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    std::copy(v.data(), v.data() + l, m.components.raw() + c * l);
    m.explained_variance.push_back(std::max(0.0, eig.eigenvalues()[col]));
  }
  return m;
}

Tensor<double> pca_project(const PcaModel& model, const Tensor<double>& latents) {
  if (latents.rank() != 2 || latents.dim(1) != model.dim()) {
    throw ShapeError("pca_project: latents " + shape_str(latents.shape()) + " do not match model dimension " +
                     std::to_string(model.dim()));
  }
  const int64_t n = latents.dim(0), l = model.dim(), k = model.k();
  Tensor<double> out({n, k});
  Eigen::Map<MatD> o(out.raw(), n, k);
  o.noalias() = (CMapD(latents.raw(), n, l).rowwise() - CMapD(model.mean.raw(), 1, l).row(0)) *
                CMapD(model.components.raw(), k, l).transpose();
  return out;
}

nlohmann::json pca_to_json(const PcaModel& m) {
  std::vector<std::vector<double>> comps;
  for (int64_t c = 0; c < m.k(); ++c) {
    comps.emplace_back(m.components.raw() + c * m.dim(), m.components.raw() + (c + 1) * m.dim());
  }
  return {{"mean", m.mean.storage()},
          {"components", comps},
          {"explained_variance", m.explained_variance},
          {"total_variance", m.total_variance}};
}

PcaModel pca_from_json(const nlohmann::json& j) {
  PcaModel m;
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto comps = j.at("components").get<std::vector<std::vector<double>>>();
  const auto l = static_cast<int64_t>(mean.size());
  if (comps.empty()) throw std::invalid_argument("pca model has no components");
  m.mean = Tensor<double>({l}, mean);
  std::vector<double> flat;
  for (const auto& c : comps) {
    if (static_cast<int64_t>(c.size()) != l) throw std::invalid_argument("pca component length mismatch");
    flat.insert(flat.end(), c.begin(), c.end());
  }
  m.components = Tensor<double>({static_cast<int64_t>(comps.size()), l}, std::move(flat));
  m.explained_variance = j.at("explained_variance").get<std::vector<double>>();
  m.total_variance = j.value("total_variance", 0.0);
  return m;
}

Trajectory compute_trajectory(Encoder& encoder, const MaskVideo& video, const PcaModel& pca, int64_t depth) {
  if (pca.k() < 2) throw std::invalid_argument("trajectory: pca model needs at least two components");
  const auto clips = sliding_window(video, depth);
  if (clips.size() < 2) throw std::invalid_argument("trajectory: video yields fewer than two clips");
  std::vector<const Clip*> ptrs;
  for (const auto& c : clips) ptrs.push_back(&c);
  const Tensor<double> z = encode_clips(encoder, ptrs).cast<double>();
  const Tensor<double> proj = pca_project(pca, z);
  Trajectory t;
  t.points = Tensor<double>({proj.dim(0), 2});
  for (int64_t i = 0; i < proj.dim(0); ++i) {
    t.start_frames.push_back(clips[i].start_frame);
    t.points[2 * i] = proj[i * pca.k()];
    t.points[2 * i + 1] = proj[i * pca.k() + 1];
  }
  return t;
}

Trajectory trajectory_export(Encoder& encoder, const MaskVideo& video, const PcaModel& pca,
                             const std::filesystem::path& path, int64_t depth) {
  Trajectory t = compute_trajectory(encoder, video, pca, depth);
  std::string csv = "start_frame,pc1,pc2\n";
  char buf[96];
  for (size_t i = 0; i < t.start_frames.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g\n", static_cast<long long>(t.start_frames[i]), t.points[2 * i],
                  t.points[2 * i + 1]);
    csv += buf;
  }
  write_text_atomic(path, csv);
  nlohmann::json summary = {{"explained_variance", pca.explained_variance},
                            {"n_points", t.start_frames.size()}};
  write_text_atomic(std::filesystem::path(path.string() + ".json"), summary.dump(2) + "\n");
  return t;
}

namespace {
double dist(const Tensor<double>& p, int64_t i, int64_t j) {
  const double dx = p[2 * i] - p[2 * j], dy = p[2 * i + 1] - p[2 * j + 1];
  return std::sqrt(dx * dx + dy * dy);
}
}  // namespace

double mean_step_distance(const Tensor<double>& points) {
  const int64_t n = points.dim(0);
  if (n < 2) throw std::invalid_argument("mean_step_distance: need two points");
  double s = 0;
  for (int64_t i = 0; i + 1 < n; ++i) s += dist(points, i, i + 1);
  return s / static_cast<double>(n - 1);
}

double mean_random_pair_distance(const Tensor<double>& points, int64_t pairs, uint64_t seed) {
  const int64_t n = points.dim(0);
  if (n < 2 || pairs < 1) throw std::invalid_argument("mean_random_pair_distance: need two points and pairs >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int64_t> pick(0, n - 1);
  double s = 0;
  for (int64_t p = 0; p < pairs; ++p) {
    int64_t i = pick(rng), j = pick(rng);
    while (j == i) j = pick(rng);
    s += dist(points, i, j);
  }
  return s / static_cast<double>(pairs);
}

}  // namespace vidvisc

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vidvisc/autograd.hpp"

namespace vidvisc {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Coupled L2: added to the gradient before the moment updates.
  double weight_decay = 0.0;
};

template <typename T>
struct AdamMoments {
  std::vector<T> first;
  std::vector<T> second;
};

// One Adam update of `params` with bias correction for step number
// `step` (1-based).
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments<T>& moments, const AdamConfig& cfg,
               int64_t step);

// Adam over groups of variables; each group carries its own config.
template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Variable<T>> params, AdamConfig cfg = {}) { add_group(std::move(params), cfg); }

  void add_group(std::vector<Variable<T>> params, AdamConfig cfg);
  void step();
  void zero_grad();

  int64_t step_count() const { return step_count_; }
  void set_step_count(int64_t n) { step_count_ = n; }
  size_t num_params() const { return params_.size(); }
  const Variable<T>& param(size_t i) const { return params_[i]; }
  AdamMoments<T>& moments(size_t i) { return moments_[i]; }
  const AdamMoments<T>& moments(size_t i) const { return moments_[i]; }
  const AdamConfig& config(size_t i) const { return configs_[i]; }

 private:
  std::vector<Variable<T>> params_;
  std::vector<AdamConfig> configs_;
  std::vector<AdamMoments<T>> moments_;
  int64_t step_count_ = 0;
};

}  // namespace vidvisc

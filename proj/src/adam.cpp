#include "vidvisc/adam.hpp"

#include <cmath>

namespace vidvisc {

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments<T>& moments, const AdamConfig& cfg,
               int64_t step) {
  if (grads.size() != params.size()) throw ShapeError("adam_step: gradient length differs from parameter length");
  if (moments.first.size() != params.size()) {
    moments.first.assign(params.size(), T{0});
    moments.second.assign(params.size(), T{0});
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]) + cfg.weight_decay * static_cast<double>(params[i]);
    const double m = cfg.beta1 * moments.first[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * moments.second[i] + (1.0 - cfg.beta2) * g * g;
    moments.first[i] = static_cast<T>(m);
    moments.second[i] = static_cast<T>(v);
    const double update = cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
    params[i] = static_cast<T>(params[i] - update);
  }
}

template <typename T>
void Adam<T>::add_group(std::vector<Variable<T>> params, AdamConfig cfg) {
  for (auto& p : params) {
    AdamMoments<T> m;
    m.first.assign(p.size(), T{0});
    m.second.assign(p.size(), T{0});
    params_.push_back(std::move(p));
    configs_.push_back(cfg);
    moments_.push_back(std::move(m));
  }
}

template <typename T>
void Adam<T>::step() {
  ++step_count_;
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    std::vector<T> zeros;
    std::span<const T> g;
    if (p.has_grad()) {
      g = p.grad().data();
    } else {
      zeros.assign(p.size(), T{0});
      g = zeros;
    }
    adam_step<T>(p.mutable_value().data(), g, moments_[i], configs_[i], step_count_);
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template void adam_step(std::span<float>, std::span<const float>, AdamMoments<float>&, const AdamConfig&, int64_t);
template void adam_step(std::span<double>, std::span<const double>, AdamMoments<double>&, const AdamConfig&,
                        int64_t);
template class Adam<float>;
template class Adam<double>;

}  // namespace vidvisc

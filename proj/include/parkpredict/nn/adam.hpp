#pragma once

#include <cmath>
#include <vector>

#include "parkpredict/nn/tensor.hpp"

namespace parkpredict::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied as value *= 1 - lr * wd
};

template <typename T>
class Adam {
 public:
  Adam(ParameterList<T> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), T(0));
      v_.emplace_back(p->value.size(), T(0));
    }
  }

  const AdamConfig& config() const { return cfg_; }
  void set_learning_rate(double lr) { cfg_.lr = lr; }
  long steps() const { return t_; }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(cfg_.lr / c1);
    const T c2_sqrt = static_cast<T>(std::sqrt(c2));
    const T eps = static_cast<T>(cfg_.eps);
    const T decay = static_cast<T>(1.0 - cfg_.lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& value = params_[i]->value;
      const auto& grad = params_[i]->grad;
      if (grad.size() != m_[i].size()) throw ShapeError("Adam: parameter resized after construction");
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < m.size(); ++k) {
        const T g = grad[k];
        m[k] = b1 * m[k] + (T(1) - b1) * g;
        v[k] = b2 * v[k] + (T(1) - b2) * g * g;
        if (cfg_.weight_decay != 0.0) value[k] *= decay;
        value[k] -= step_size * m[k] / (std::sqrt(v[k]) / c2_sqrt + eps);
      }
    }
  }

 private:
  ParameterList<T> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  long t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm. Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const ParameterList<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params)
    for (const T g : p->grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto* p : params)
      for (T& g : p->grad.values()) g *= scale;
  }
  return norm;
}

}  // namespace parkpredict::nn

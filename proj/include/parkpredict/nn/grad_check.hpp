#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>

#include "parkpredict/nn/tensor.hpp"

namespace parkpredict::nn {

struct GradCheckOptions {
  double step = 1e-5;
  double denominator_floor = 1e-6;
  // 0 checks every entry; otherwise a seeded sample of this many entries per parameter.
  std::size_t max_entries_per_parameter = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Compares analytic gradients with central differences.
///
/// `loss` evaluates the scalar objective at the current parameter values. `backward` must leave
/// dloss/dparam in each parameter's grad (it is called once, after zeroing).
inline GradCheckResult grad_check(const ParameterList<double>& params, const std::function<double()>& loss,
                                  const std::function<void()>& backward, const GradCheckOptions& opt = {}) {
  zero_grads(params);
  backward();
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (const auto* p : params) analytic.push_back(p->grad);

  GradCheckResult res;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i]->value;
    std::vector<std::size_t> idx(value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_entries_per_parameter > 0 && idx.size() > opt.max_entries_per_parameter) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries_per_parameter);
      std::sort(idx.begin(), idx.end());
    }
    for (const std::size_t k : idx) {
      const double saved = value[k];
      value[k] = saved + opt.step;
      const double up = loss();
      value[k] = saved - opt.step;
      const double down = loss();
      value[k] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[i][k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.denominator_floor});
      ++res.entries_checked;
      if (rel > res.max_relative_error || res.worst_parameter.empty()) {
        if (rel >= res.max_relative_error) {
          res.max_relative_error = rel;
          res.worst_parameter = params[i]->name;
          res.worst_index = k;
          res.worst_analytic = a;
          res.worst_numeric = numeric;
        }
      }
    }
  }
  return res;
}

}  // namespace parkpredict::nn

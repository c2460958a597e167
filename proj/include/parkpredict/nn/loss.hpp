#pragma once

#include <algorithm>
#include <cmath>

#include "parkpredict/nn/tensor.hpp"

namespace parkpredict::nn {

inline constexpr double kProbabilityClamp = 1e-12;

/// Column-wise softmax with max subtraction.
template <typename T>
Mat<T> softmax(const Mat<T>& logits) {
  Mat<T> p(logits.rows(), logits.cols());
  for (Eigen::Index n = 0; n < logits.cols(); ++n) {
    const T m = logits.col(n).maxCoeff();
    p.col(n) = (logits.col(n).array() - m).exp().matrix();
    p.col(n) /= p.col(n).sum();
  }
  return p;
}

/// Vector-Jacobian product of softmax: given p and dL/dp, returns dL/dlogits.
template <typename T>
Mat<T> softmax_backward(const Mat<T>& p, const Mat<T>& dp) {
  Mat<T> dz(p.rows(), p.cols());
  for (Eigen::Index n = 0; n < p.cols(); ++n) {
    const T inner = p.col(n).dot(dp.col(n));
    dz.col(n) = (p.col(n).array() * (dp.col(n).array() - inner)).matrix();
  }
  return dz;
}

/// -sum_j g_j log(max(p_j, 1e-12)) for one distribution.
template <typename P, typename G>
double cross_entropy(const P& p, const G& onehot) {
  if (p.size() != onehot.size()) throw ShapeError("cross_entropy: length mismatch");
  double out = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j)
    if (onehot(j) != 0) out -= static_cast<double>(onehot(j)) * std::log(std::max(static_cast<double>(p(j)), kProbabilityClamp));
  return out;
}

}  // namespace parkpredict::nn

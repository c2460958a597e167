#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "parkpredict/errors.hpp"

namespace parkpredict::nn {

/// Activations are column-major (features x batch): one column per example.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowMajorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstRowMajorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Dense row-major tensor. Training uses float, gradient checking uses double.
/// Storage is SIMD-aligned: Eigen's reduction order depends on alignment, and runs must be bit-identical.
template <typename T>
class Tensor {
 public:
  using Storage = std::vector<T, Eigen::aligned_allocator<T>>;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0)) : shape_(std::move(shape)) {
    data_.assign(element_count(shape_), fill);
  }
  Tensor(std::vector<std::size_t> shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != element_count(shape_)) throw ShapeError("Tensor: data length does not match shape");
  }

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  Storage& values() { return data_; }
  const Storage& values() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// First dimension as rows, everything else flattened into columns.
  RowMajorMap<T> matrix() { return RowMajorMap<T>(data_.data(), rows(), cols()); }
  ConstRowMajorMap<T> matrix() const { return ConstRowMajorMap<T>(data_.data(), rows(), cols()); }
  Eigen::Map<Vec<T>> vector() { return Eigen::Map<Vec<T>>(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  Eigen::Map<const Vec<T>> vector() const {
    return Eigen::Map<const Vec<T>>(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Eigen::Index rows() const { return shape_.empty() ? 1 : static_cast<Eigen::Index>(shape_[0]); }
  Eigen::Index cols() const {
    return shape_.empty() ? 1 : static_cast<Eigen::Index>(data_.size() / std::max<std::size_t>(shape_[0], 1));
  }

  std::vector<std::size_t> shape_;
  Storage data_;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<std::size_t> shape) : name(std::move(n)), value(shape), grad(shape) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
using ParameterList = std::vector<Parameter<T>*>;

template <typename T>
void zero_grads(const ParameterList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

/// Uniform in +-1/sqrt(fan_in). Draws in double so float and double models built from the same
/// seed start from the same weights (up to rounding).
template <typename T>
void init_uniform(Parameter<T>& p, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.value.values()) v = static_cast<T>(dist(rng));
}

/// Copies values between parameter lists of possibly different scalar types.
template <typename To, typename From>
void copy_values(const ParameterList<To>& to, const ParameterList<From>& from) {
  if (to.size() != from.size()) throw ShapeError("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < to.size(); ++i) {
    if (to[i]->value.shape() != from[i]->value.shape()) throw ShapeError("copy_values: shape mismatch for " + to[i]->name);
    for (std::size_t k = 0; k < to[i]->value.size(); ++k) to[i]->value[k] = static_cast<To>(from[i]->value[k]);
  }
}

}  // namespace parkpredict::nn

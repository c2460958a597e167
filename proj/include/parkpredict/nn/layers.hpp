#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "parkpredict/nn/tensor.hpp"

namespace parkpredict::nn {

// ---------------------------------------------------------------------------------------------
// Fully connected: y = W x + b

template <typename T>
class Dense {
 public:
  Dense() = default;
  Dense(const std::string& name, std::size_t in, std::size_t out)
      : weight_(name + ".weight", {out, in}), bias_(name + ".bias", {out}) {}

  std::size_t in_features() const { return weight_.value.shape()[1]; }
  std::size_t out_features() const { return weight_.value.shape()[0]; }

  void init(std::mt19937_64& rng) {
    init_uniform(weight_, in_features(), rng);
    init_uniform(bias_, in_features(), rng);
  }

  Mat<T> forward(const Mat<T>& x) const {
    if (static_cast<std::size_t>(x.rows()) != in_features()) throw ShapeError("Dense: input rows != in_features");
    Mat<T> y = weight_.value.matrix() * x;
    y.colwise() += bias_.value.vector();
    return y;
  }

  /// Accumulates parameter gradients and returns dL/dx.
  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy) {
    if (dy.rows() != static_cast<Eigen::Index>(out_features()) || dy.cols() != x.cols())
      throw ShapeError("Dense: gradient shape mismatch");
    weight_.grad.matrix().noalias() += dy * x.transpose();
    bias_.grad.vector() += dy.rowwise().sum();
    return weight_.value.matrix().transpose() * dy;
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  void collect(ParameterList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
};

// ---------------------------------------------------------------------------------------------
// LSTM

template <typename T>
inline T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

/// Standard LSTM cell, gate rows ordered (input, forget, candidate, output).
///
/// Besides the per-step input, a layer may take a per-sequence static input that is appended to
/// every step's input. Its slice of the input weight is applied once per sequence instead of once
/// per step; the arithmetic is the same as replicating it.
template <typename T>
class Lstm {
 public:
  struct StepCache {
    Mat<T> x, h_prev, c_prev, gates, c, tanh_c;
  };
  struct Trace {
    Mat<T> static_input;
    Mat<T> static_term;  // W_static * s, 4h x B
    std::vector<StepCache> steps;
  };

  Lstm() = default;
  Lstm(const std::string& name, std::size_t input, std::size_t hidden, std::size_t static_input = 0)
      : input_(input),
        static_(static_input),
        hidden_(hidden),
        w_input_(name + ".w_input", {4 * hidden, input + static_input}),
        w_hidden_(name + ".w_hidden", {4 * hidden, hidden}),
        bias_(name + ".bias", {4 * hidden}) {}

  std::size_t input_size() const { return input_; }
  std::size_t static_size() const { return static_; }
  std::size_t hidden_size() const { return hidden_; }

  void init(std::mt19937_64& rng, double forget_bias = 1.0) {
    init_uniform(w_input_, input_ + static_, rng);
    init_uniform(w_hidden_, hidden_, rng);
    init_uniform(bias_, hidden_, rng);
    for (std::size_t k = hidden_; k < 2 * hidden_; ++k) bias_.value[k] = static_cast<T>(forget_bias);
  }

  /// Starts a sequence: precomputes the static contribution.
  void begin(Trace& trace, const Mat<T>* static_input, Eigen::Index batch) const {
    trace.steps.clear();
    if (static_ > 0) {
      if (!static_input || static_cast<std::size_t>(static_input->rows()) != static_ || static_input->cols() != batch)
        throw ShapeError("Lstm: static input shape mismatch");
      trace.static_input = *static_input;
      trace.static_term = w_input_.value.matrix().rightCols(static_) * *static_input;
    }
  }

  /// One step; appends its cache to `trace` and returns (h, c).
  std::pair<Mat<T>, Mat<T>> step(Trace& trace, const Mat<T>& x, const Mat<T>& h_prev, const Mat<T>& c_prev) const {
    if (static_cast<std::size_t>(x.rows()) != input_) throw ShapeError("Lstm: step input rows != input size");
    if (static_cast<std::size_t>(h_prev.rows()) != hidden_ || h_prev.cols() != x.cols() || c_prev.cols() != x.cols())
      throw ShapeError("Lstm: state shape mismatch");
    const auto h = static_cast<Eigen::Index>(hidden_);
    Mat<T> z = w_input_.value.matrix().leftCols(input_) * x;
    z.noalias() += w_hidden_.value.matrix() * h_prev;
    z.colwise() += bias_.value.vector();
    if (static_ > 0) z += trace.static_term;

    StepCache cache;
    cache.x = x;
    cache.h_prev = h_prev;
    cache.c_prev = c_prev;
    cache.gates.resize(z.rows(), z.cols());
    auto gates = cache.gates.array();
    const auto zs = z.array();
    gates.topRows(2 * h) = (T(1) + (-zs.topRows(2 * h)).exp()).inverse();
    gates.middleRows(2 * h, h) = zs.middleRows(2 * h, h).tanh();
    gates.bottomRows(h) = (T(1) + (-zs.bottomRows(h)).exp()).inverse();
    cache.c = (gates.middleRows(h, h) * c_prev.array() + gates.topRows(h) * gates.middleRows(2 * h, h)).matrix();
    cache.tanh_c = cache.c.array().tanh().matrix();
    Mat<T> h_out = (gates.bottomRows(h) * cache.tanh_c.array()).matrix();
    Mat<T> c_out = cache.c;
    trace.steps.push_back(std::move(cache));
    return {std::move(h_out), std::move(c_out)};
  }

  struct StepGrad {
    Mat<T> dx, dh_prev, dc_prev;
  };

  /// Backward through step `t` of `trace` given gradients on its outputs (h_t, c_t).
  /// Static-input gradients are accumulated into `dz_static_sum` (4h x B).
  StepGrad step_backward(const Trace& trace, std::size_t t, const Mat<T>& dh, const Mat<T>& dc, Mat<T>& dz_static_sum) {
    const auto& s = trace.steps[t];
    const auto h = static_cast<Eigen::Index>(hidden_);
    const auto g = s.gates.array();
    const auto i_gate = g.topRows(h);
    const auto f_gate = g.middleRows(h, h);
    const auto cand = g.middleRows(2 * h, h);
    const auto o_gate = g.bottomRows(h);

    const auto tc = s.tanh_c.array();
    const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic> dc_total = dc.array() + dh.array() * o_gate * (T(1) - tc * tc);
    Mat<T> dz(4 * h, dh.cols());
    auto dza = dz.array();
    dza.topRows(h) = dc_total * cand * i_gate * (T(1) - i_gate);
    dza.middleRows(h, h) = dc_total * s.c_prev.array() * f_gate * (T(1) - f_gate);
    dza.middleRows(2 * h, h) = dc_total * i_gate * (T(1) - cand * cand);
    dza.bottomRows(h) = dh.array() * tc * o_gate * (T(1) - o_gate);

    w_input_.grad.matrix().leftCols(input_).noalias() += dz * s.x.transpose();
    w_hidden_.grad.matrix().noalias() += dz * s.h_prev.transpose();
    bias_.grad.vector() += dz.rowwise().sum();
    if (static_ > 0) {
      if (dz_static_sum.size() == 0) dz_static_sum = Mat<T>::Zero(dz.rows(), dz.cols());
      dz_static_sum += dz;
    }

    StepGrad out;
    out.dx = w_input_.value.matrix().leftCols(input_).transpose() * dz;
    out.dh_prev = w_hidden_.value.matrix().transpose() * dz;
    out.dc_prev = (dc_total * f_gate).matrix();
    return out;
  }

  /// Finishes backward for the static input; returns dL/ds (empty when the layer has none).
  Mat<T> finish_backward(const Trace& trace, const Mat<T>& dz_static_sum) {
    if (static_ == 0 || dz_static_sum.size() == 0) return {};
    w_input_.grad.matrix().rightCols(static_).noalias() += dz_static_sum * trace.static_input.transpose();
    return w_input_.value.matrix().rightCols(static_).transpose() * dz_static_sum;
  }

  Parameter<T>& w_input() { return w_input_; }
  Parameter<T>& w_hidden() { return w_hidden_; }
  Parameter<T>& bias() { return bias_; }
  void collect(ParameterList<T>& out) {
    out.push_back(&w_input_);
    out.push_back(&w_hidden_);
    out.push_back(&bias_);
  }

 private:
  std::size_t input_ = 0;
  std::size_t static_ = 0;
  std::size_t hidden_ = 0;
  Parameter<T> w_input_;
  Parameter<T> w_hidden_;
  Parameter<T> bias_;
};

// ---------------------------------------------------------------------------------------------
// Images are columns of a Mat in CHW order, one column per image.

struct ImageShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// 2-D cross-correlation with square kernels, zero padding and a uniform stride.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, ImageShape in, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
         std::size_t padding = 0)
      : in_(in), kernel_(kernel), stride_(stride), padding_(padding) {
    if (kernel == 0 || stride == 0) throw ShapeError("Conv2d: kernel and stride must be positive");
    if (kernel > in.height + 2 * padding || kernel > in.width + 2 * padding)
      throw ShapeError("Conv2d: kernel larger than padded input");
    out_ = {out_channels, (in.height + 2 * padding - kernel) / stride + 1, (in.width + 2 * padding - kernel) / stride + 1};
    weight_ = Parameter<T>(name + ".weight", {out_channels, in.channels, kernel, kernel});
    bias_ = Parameter<T>(name + ".bias", {out_channels});
  }

  ImageShape input_shape() const { return in_; }
  ImageShape output_shape() const { return out_; }

  void init(std::mt19937_64& rng) {
    const std::size_t fan_in = in_.channels * kernel_ * kernel_;
    init_uniform(weight_, fan_in, rng);
    init_uniform(bias_, fan_in, rng);
  }

  Mat<T> forward(const Mat<T>& x) const {
    if (static_cast<std::size_t>(x.rows()) != in_.size()) throw ShapeError("Conv2d: wrong input image size");
    Mat<T> y(static_cast<Eigen::Index>(out_.size()), x.cols());
    Mat<T> cols;
    const auto out_hw = static_cast<Eigen::Index>(out_.height * out_.width);
    const auto w = weight_.value.matrix();
    for (Eigen::Index n = 0; n < x.cols(); ++n) {
      im2col(x.col(n), cols);
      Eigen::Map<Mat<T>> out_img(y.col(n).data(), out_hw, static_cast<Eigen::Index>(out_.channels));
      // out_img is (HW x C) column-major == CHW flattened; compute (W * cols)^T.
      out_img.noalias() = cols.transpose() * w.transpose();
      out_img.rowwise() += bias_.value.vector().transpose();
    }
    return y;
  }

  /// Returns dL/dx, or an empty matrix when `input_grad` is false (first layer on raw images).
  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy, bool input_grad = true) {
    if (static_cast<std::size_t>(dy.rows()) != out_.size() || dy.cols() != x.cols())
      throw ShapeError("Conv2d: gradient shape mismatch");
    Mat<T> dx;
    if (input_grad) dx = Mat<T>::Zero(x.rows(), x.cols());
    Mat<T> cols, dcols;
    const auto out_hw = static_cast<Eigen::Index>(out_.height * out_.width);
    auto w = weight_.value.matrix();
    auto dw = weight_.grad.matrix();
    for (Eigen::Index n = 0; n < x.cols(); ++n) {
      im2col(x.col(n), cols);
      Eigen::Map<const Mat<T>> dout(dy.col(n).data(), out_hw, static_cast<Eigen::Index>(out_.channels));
      dw.noalias() += dout.transpose() * cols.transpose();
      bias_.grad.vector() += dout.colwise().sum().transpose();
      if (!input_grad) continue;
      dcols.noalias() = w.transpose() * dout.transpose();
      col2im(dcols, dx.col(n));
    }
    return dx;
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  void collect(ParameterList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  // cols: (C*k*k) x (out_h*out_w)
  template <typename Col>
  void im2col(const Col& img, Mat<T>& cols) const {
    const auto k = kernel_;
    cols.setZero(static_cast<Eigen::Index>(in_.channels * k * k), static_cast<Eigen::Index>(out_.height * out_.width));
    for (std::size_t c = 0; c < in_.channels; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto row = static_cast<Eigen::Index>((c * k + ky) * k + kx);
          for (std::size_t oy = 0; oy < out_.height; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(padding_);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_.height)) continue;
            for (std::size_t ox = 0; ox < out_.width; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(padding_);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_.width)) continue;
              cols(row, static_cast<Eigen::Index>(oy * out_.width + ox)) =
                  img(static_cast<Eigen::Index>((c * in_.height + static_cast<std::size_t>(iy)) * in_.width +
                                                static_cast<std::size_t>(ix)));
            }
          }
        }
  }

  template <typename Col>
  void col2im(const Mat<T>& cols, Col img) const {
    const auto k = kernel_;
    for (std::size_t c = 0; c < in_.channels; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto row = static_cast<Eigen::Index>((c * k + ky) * k + kx);
          for (std::size_t oy = 0; oy < out_.height; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(padding_);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_.height)) continue;
            for (std::size_t ox = 0; ox < out_.width; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(padding_);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_.width)) continue;
              img(static_cast<Eigen::Index>((c * in_.height + static_cast<std::size_t>(iy)) * in_.width +
                                            static_cast<std::size_t>(ix))) +=
                  cols(row, static_cast<Eigen::Index>(oy * out_.width + ox));
            }
          }
        }
  }

  ImageShape in_, out_;
  std::size_t kernel_ = 1, stride_ = 1, padding_ = 0;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

/// Max pooling with a square window. Ties go to the lowest flat index inside the window.
template <typename T>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(ImageShape in, std::size_t window = 2, std::size_t stride = 2) : in_(in), window_(window), stride_(stride) {
    if (window == 0 || stride == 0 || window > in.height || window > in.width)
      throw ShapeError("MaxPool2d: window larger than input");
    out_ = {in.channels, (in.height - window) / stride + 1, (in.width - window) / stride + 1};
  }

  ImageShape input_shape() const { return in_; }
  ImageShape output_shape() const { return out_; }

  /// argmax receives, per output element, the flat input index that won.
  Mat<T> forward(const Mat<T>& x, std::vector<Eigen::Index>& argmax) const {
    if (static_cast<std::size_t>(x.rows()) != in_.size()) throw ShapeError("MaxPool2d: wrong input image size");
    Mat<T> y(static_cast<Eigen::Index>(out_.size()), x.cols());
    argmax.resize(out_.size() * static_cast<std::size_t>(x.cols()));
    std::size_t a = 0;
    for (Eigen::Index n = 0; n < x.cols(); ++n)
      for (std::size_t c = 0; c < out_.channels; ++c)
        for (std::size_t oy = 0; oy < out_.height; ++oy)
          for (std::size_t ox = 0; ox < out_.width; ++ox, ++a) {
            Eigen::Index best = -1;
            T best_v = -std::numeric_limits<T>::infinity();
            for (std::size_t wy = 0; wy < window_; ++wy)
              for (std::size_t wx = 0; wx < window_; ++wx) {
                const auto idx = static_cast<Eigen::Index>((c * in_.height + oy * stride_ + wy) * in_.width + ox * stride_ + wx);
                if (best < 0 || x(idx, n) > best_v) {
                  best = idx;
                  best_v = x(idx, n);
                }
              }
            y(static_cast<Eigen::Index>((c * out_.height + oy) * out_.width + ox), n) = best_v;
            argmax[a] = best;
          }
    return y;
  }

  Mat<T> backward(const std::vector<Eigen::Index>& argmax, const Mat<T>& dy) const {
    Mat<T> dx = Mat<T>::Zero(static_cast<Eigen::Index>(in_.size()), dy.cols());
    std::size_t a = 0;
    for (Eigen::Index n = 0; n < dy.cols(); ++n)
      for (Eigen::Index o = 0; o < dy.rows(); ++o, ++a) dx(argmax[a], n) += dy(o, n);
    return dx;
  }

 private:
  ImageShape in_, out_;
  std::size_t window_ = 2, stride_ = 2;
};

template <typename T>
Mat<T> relu_forward(const Mat<T>& x) {
  return x.cwiseMax(T(0));
}

/// Gradient passes where the forward input was strictly positive.
template <typename T>
Mat<T> relu_backward(const Mat<T>& x, const Mat<T>& dy) {
  return (x.array() > T(0)).select(dy, T(0));
}

}  // namespace parkpredict::nn

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "parkpredict/dataset.hpp"
#include "parkpredict/geometry.hpp"
#include "parkpredict/nn/checkpoint.hpp"
#include "parkpredict/nn/layers.hpp"
#include "parkpredict/nn/loss.hpp"

namespace parkpredict {

using nn::Mat;

// Network inputs measure positions in units of 10 m.
inline constexpr double kPositionScale = 0.1;

// ---------------------------------------------------------------------------------------------
// Ego frame: origin at the last history pose, x axis along its heading.

struct EgoFrame {
  Pose origin;

  Vec2 point_to_ego(double x, double y) const {
    const double dx = x - origin.x, dy = y - origin.y;
    const double c = std::cos(origin.theta), s = std::sin(origin.theta);
    return {c * dx + s * dy, -s * dx + c * dy};
  }
  Pose to_ego(const Pose& p) const {
    const Vec2 q = point_to_ego(p.x, p.y);
    return {q.x, q.y, wrap_angle(p.theta - origin.theta)};
  }
  Pose to_world(const Pose& p) const {
    const double c = std::cos(origin.theta), s = std::sin(origin.theta);
    return {origin.x + c * p.x - s * p.y, origin.y + s * p.x + c * p.y, wrap_angle(p.theta + origin.theta)};
  }
};

// ---------------------------------------------------------------------------------------------
// Configurations

struct IntentNetConfig {
  int spots = 64;
  int n_hist = 5;
  int layers = 2;
  int hidden = 64;
  bool use_cnn = false;
  int bev_height = 96;
  int bev_width = 96;
  int cnn_features = 64;
  friend bool operator==(const IntentNetConfig&, const IntentNetConfig&) = default;
};

struct TrajNetConfig {
  int n_hist = 5;
  int n_pred = 20;
  int encoder_layers = 2;
  int hidden = 64;
  int decoder_layers = 1;
  bool use_cnn = false;
  int bev_height = 96;
  int bev_width = 96;
  int cnn_features = 64;
  friend bool operator==(const TrajNetConfig&, const TrajNetConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(IntentNetConfig, spots, n_hist, layers, hidden, use_cnn, bev_height,
                                                bev_width, cnn_features)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrajNetConfig, n_hist, n_pred, encoder_layers, hidden, decoder_layers,
                                                use_cnn, bev_height, bev_width, cnn_features)

// ---------------------------------------------------------------------------------------------
// Batches

/// Network-ready view of a set of snippets, all in per-snippet ego frames.
template <typename T>
struct Batch {
  int size = 0;
  int spots = 0;
  std::vector<Mat<T>> poses;     // n_hist of 3 x B
  Mat<T> occupancy;              // 3G x B: (dx, dy, free) per spot
  Mat<T> free_flags;             // G x B
  std::vector<Mat<T>> images;    // n_hist of 3HW x B, CHW in [0, 1]; empty without BEV
  std::vector<int> labels;       // 0-based category, G = undetermined
  std::vector<Mat<T>> future;    // n_pred of 3 x B; empty when unknown
  std::vector<EgoFrame> frames;

  /// Conditioning vectors (dx, dy, free) for category j per column; zeros for j == G.
  Mat<T> conditioning(const std::vector<int>& categories) const {
    if (static_cast<int>(categories.size()) != size) throw ShapeError("conditioning: one category per example");
    Mat<T> c = Mat<T>::Zero(3, size);
    for (int n = 0; n < size; ++n) {
      const int j = categories[static_cast<std::size_t>(n)];
      if (j < 0 || j > spots) throw ShapeError("conditioning: intent index out of range");
      if (j < spots) c.col(n) = occupancy.col(n).segment(3 * j, 3);
    }
    return c;
  }
  Mat<T> zero_conditioning() const { return Mat<T>::Zero(3, size); }
};

template <typename T>
Batch<T> make_batch(const std::vector<const Snippet*>& snippets, int n_hist, int n_pred, bool with_images,
                    int bev_height = 0, int bev_width = 0) {
  if (snippets.empty()) throw ShapeError("make_batch: empty batch");
  Batch<T> b;
  b.size = static_cast<int>(snippets.size());
  b.spots = snippets.front()->spot_count();
  const int g = b.spots;
  const auto bsz = static_cast<Eigen::Index>(b.size);
  b.poses.assign(static_cast<std::size_t>(n_hist), Mat<T>(3, bsz));
  b.occupancy.resize(3 * g, bsz);
  b.free_flags.resize(g, bsz);
  const bool has_future = !snippets.front()->z_future.empty();
  if (has_future) b.future.assign(static_cast<std::size_t>(n_pred), Mat<T>(3, bsz));
  const std::size_t hw = static_cast<std::size_t>(bev_height) * static_cast<std::size_t>(bev_width);
  if (with_images) b.images.assign(static_cast<std::size_t>(n_hist), Mat<T>(static_cast<Eigen::Index>(3 * hw), bsz));

  for (Eigen::Index n = 0; n < bsz; ++n) {
    const Snippet& s = *snippets[static_cast<std::size_t>(n)];
    if (s.spot_count() != g || s.z_hist.size() != static_cast<std::size_t>(3 * n_hist))
      throw ShapeError("make_batch: snippet shapes differ from the model configuration");
    if (has_future && s.z_future.size() != static_cast<std::size_t>(3 * n_pred))
      throw ShapeError("make_batch: future horizon differs from the model configuration");
    const std::size_t last = static_cast<std::size_t>(3 * (n_hist - 1));
    EgoFrame frame{{s.z_hist[last], s.z_hist[last + 1], s.z_hist[last + 2]}};
    b.frames.push_back(frame);
    auto put = [&](Mat<T>& m, const float* p) {
      const Pose e = frame.to_ego({p[0], p[1], p[2]});
      m(0, n) = static_cast<T>(e.x * kPositionScale);
      m(1, n) = static_cast<T>(e.y * kPositionScale);
      m(2, n) = static_cast<T>(e.theta);
    };
    for (int t = 0; t < n_hist; ++t) put(b.poses[static_cast<std::size_t>(t)], &s.z_hist[static_cast<std::size_t>(3 * t)]);
    if (has_future)
      for (int k = 0; k < n_pred; ++k) put(b.future[static_cast<std::size_t>(k)], &s.z_future[static_cast<std::size_t>(3 * k)]);
    for (int j = 0; j < g; ++j) {
      const auto o = static_cast<std::size_t>(3 * j);
      const Vec2 q = frame.point_to_ego(s.occ[o], s.occ[o + 1]);
      b.occupancy(3 * j, n) = static_cast<T>(q.x * kPositionScale);
      b.occupancy(3 * j + 1, n) = static_cast<T>(q.y * kPositionScale);
      b.occupancy(3 * j + 2, n) = static_cast<T>(s.occ[o + 2]);
      b.free_flags(j, n) = static_cast<T>(s.occ[o + 2]);
    }
    b.labels.push_back(s.intent.empty() ? g : s.intent_index());
    if (with_images) {
      if (s.bev.size() != static_cast<std::size_t>(n_hist) * hw * 3)
        throw ShapeError("make_batch: snippet has no BEV frames of the configured size");
      for (int t = 0; t < n_hist; ++t) {
        const std::uint8_t* src = s.bev.data() + static_cast<std::size_t>(t) * hw * 3;
        auto col = b.images[static_cast<std::size_t>(t)].col(n);
        for (std::size_t px = 0; px < hw; ++px)
          for (std::size_t ch = 0; ch < 3; ++ch)
            col(static_cast<Eigen::Index>(ch * hw + px)) = static_cast<T>(src[px * 3 + ch]) / T(255);
      }
    }
  }
  return b;
}

// ---------------------------------------------------------------------------------------------
// CNN encoder: 3 x (conv3x3 pad 1, ReLU, maxpool 2x2), flatten, dense.

template <typename T>
class CnnEncoder {
 public:
  struct Trace {
    Mat<T> input;
    Mat<T> conv[3], act[3], pooled[3];
    std::vector<Eigen::Index> argmax[3];
    Mat<T> out;
  };

  CnnEncoder() = default;
  CnnEncoder(const std::string& name, int height, int width, int features) {
    if (height < 8 || width < 8) throw ShapeError("CnnEncoder: frames must be at least 8x8");
    nn::ImageShape shape{3, static_cast<std::size_t>(height), static_cast<std::size_t>(width)};
    const std::size_t channels[3] = {8, 16, 32};
    for (int i = 0; i < 3; ++i) {
      conv_[i] = nn::Conv2d<T>(name + ".conv" + std::to_string(i + 1), shape, channels[i], 3, 1, 1);
      pool_[i] = nn::MaxPool2d<T>(conv_[i].output_shape(), 2, 2);
      shape = pool_[i].output_shape();
    }
    fc_ = nn::Dense<T>(name + ".fc", shape.size(), static_cast<std::size_t>(features));
  }

  nn::ImageShape input_shape() const { return conv_[0].input_shape(); }

  void init(std::mt19937_64& rng) {
    for (auto& c : conv_) c.init(rng);
    fc_.init(rng);
  }

  /// images: 3HW x N, one column per frame.
  Mat<T> forward(const Mat<T>& images, Trace& tr) const {
    if (static_cast<std::size_t>(images.rows()) != input_shape().size()) throw ShapeError("CnnEncoder: wrong frame shape");
    tr.input = images;
    const Mat<T>* x = &tr.input;
    for (int i = 0; i < 3; ++i) {
      tr.conv[i] = conv_[i].forward(*x);
      tr.act[i] = nn::relu_forward(tr.conv[i]);
      tr.pooled[i] = pool_[i].forward(tr.act[i], tr.argmax[i]);
      x = &tr.pooled[i];
    }
    tr.out = fc_.forward(tr.pooled[2]);
    return tr.out;
  }

  void backward(Trace& tr, const Mat<T>& dout) {
    Mat<T> d = fc_.backward(tr.pooled[2], dout);
    for (int i = 2; i >= 0; --i) {
      d = pool_[i].backward(tr.argmax[i], d);
      d = nn::relu_backward(tr.conv[i], d);
      d = conv_[i].backward(i == 0 ? tr.input : tr.pooled[i - 1], d, i > 0);
    }
  }

  void collect(nn::ParameterList<T>& out) {
    for (auto& c : conv_) c.collect(out);
    fc_.collect(out);
  }

 private:
  nn::Conv2d<T> conv_[3];
  nn::MaxPool2d<T> pool_[3];
  nn::Dense<T> fc_;
};

// ---------------------------------------------------------------------------------------------
// Stacked LSTM over a sequence, zero initial state.

template <typename T>
class LstmStack {
 public:
  struct Trace {
    std::vector<typename nn::Lstm<T>::Trace> layer;
    std::vector<std::vector<Mat<T>>> outputs;  // [layer][step] h
    std::vector<Mat<T>> final_c;               // per layer
  };

  LstmStack() = default;
  LstmStack(const std::string& name, int layers, std::size_t input, std::size_t hidden, std::size_t static_input = 0) {
    if (layers < 1) throw ShapeError("LstmStack: need at least one layer");
    for (int l = 0; l < layers; ++l)
      layers_.emplace_back(name + ".lstm" + std::to_string(l + 1), l == 0 ? input : hidden, hidden,
                           l == 0 ? static_input : 0);
  }

  std::size_t depth() const { return layers_.size(); }
  std::size_t hidden() const { return layers_.back().hidden_size(); }

  void init(std::mt19937_64& rng) {
    for (auto& l : layers_) l.init(rng);
  }

  void forward(const std::vector<Mat<T>>& inputs, const Mat<T>* static_input, Trace& tr) const {
    if (inputs.empty()) throw ShapeError("LstmStack: empty sequence");
    const auto b = inputs.front().cols();
    tr.layer.assign(layers_.size(), {});
    tr.outputs.assign(layers_.size(), {});
    tr.final_c.assign(layers_.size(), {});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& cell = layers_[l];
      cell.begin(tr.layer[l], l == 0 ? static_input : nullptr, b);
      Mat<T> h = Mat<T>::Zero(static_cast<Eigen::Index>(cell.hidden_size()), b);
      Mat<T> c = h;
      const auto& xs = l == 0 ? inputs : tr.outputs[l - 1];
      for (const auto& x : xs) {
        std::tie(h, c) = cell.step(tr.layer[l], x, h, c);
        tr.outputs[l].push_back(h);
      }
      tr.final_c[l] = c;
    }
  }

  const Mat<T>& final_h(const Trace& tr) const { return tr.outputs.back().back(); }
  const Mat<T>& final_c(const Trace& tr) const { return tr.final_c.back(); }

  struct Grad {
    std::vector<Mat<T>> dinputs;
    Mat<T> dstatic;
  };

  /// dh_top[t]: gradient on the top layer's output at step t (empty = zero).
  /// dh_final/dc_final: extra gradient on the top layer's final state (empty = zero).
  Grad backward(const Trace& tr, std::vector<Mat<T>> dh_top, const Mat<T>& dh_final, const Mat<T>& dc_final) {
    const std::size_t steps = tr.outputs.front().size();
    const auto b = tr.outputs.front().front().cols();
    const auto zero = [&](std::size_t n) { return Mat<T>::Zero(static_cast<Eigen::Index>(n), b); };
    dh_top.resize(steps);
    Grad out;
    for (std::size_t li = layers_.size(); li-- > 0;) {
      auto& cell = layers_[li];
      const bool top = li + 1 == layers_.size();
      std::vector<Mat<T>> dx(steps);
      Mat<T> dh_next = zero(cell.hidden_size());
      Mat<T> dc_next = zero(cell.hidden_size());
      if (top && dh_final.size()) dh_next = dh_final;
      if (top && dc_final.size()) dc_next = dc_final;
      Mat<T> dz_static;
      for (std::size_t t = steps; t-- > 0;) {
        Mat<T> dh = dh_next;
        if (dh_top[t].size()) dh += dh_top[t];
        auto g = cell.step_backward(tr.layer[li], t, dh, dc_next, dz_static);
        dx[t] = std::move(g.dx);
        dh_next = std::move(g.dh_prev);
        dc_next = std::move(g.dc_prev);
      }
      if (li == 0) out.dstatic = cell.finish_backward(tr.layer[0], dz_static);
      dh_top = std::move(dx);
    }
    out.dinputs = std::move(dh_top);
    return out;
  }

  void collect(nn::ParameterList<T>& out) {
    for (auto& l : layers_) l.collect(out);
  }
  std::vector<nn::Lstm<T>>& layers() { return layers_; }

 private:
  std::vector<nn::Lstm<T>> layers_;
};

namespace detail {

/// Per-step encoder inputs: pose rows, then visual features when present.
template <typename T>
std::vector<Mat<T>> encoder_inputs(const std::vector<Mat<T>>& poses, const Mat<T>* visual) {
  std::vector<Mat<T>> xs;
  const auto b = poses.front().cols();
  for (std::size_t t = 0; t < poses.size(); ++t) {
    if (!visual) {
      xs.push_back(poses[t]);
      continue;
    }
    Mat<T> x(3 + visual->rows(), b);
    x.topRows(3) = poses[t];
    x.bottomRows(visual->rows()) = visual->middleCols(static_cast<Eigen::Index>(t) * b, b);
    xs.push_back(std::move(x));
  }
  return xs;
}

/// Frames stacked step-major: column t*B + n holds step t of example n.
template <typename T>
Mat<T> stack_images(const std::vector<Mat<T>>& images) {
  const auto b = images.front().cols();
  Mat<T> all(images.front().rows(), b * static_cast<Eigen::Index>(images.size()));
  for (std::size_t t = 0; t < images.size(); ++t) all.middleCols(static_cast<Eigen::Index>(t) * b, b) = images[t];
  return all;
}

template <typename T>
Mat<T> visual_grad(const std::vector<Mat<T>>& dinputs, Eigen::Index features) {
  const auto b = dinputs.front().cols();
  Mat<T> d(features, b * static_cast<Eigen::Index>(dinputs.size()));
  for (std::size_t t = 0; t < dinputs.size(); ++t)
    d.middleCols(static_cast<Eigen::Index>(t) * b, b) = dinputs[t].bottomRows(features);
  return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Intent network

template <typename T>
class IntentNet {
 public:
  struct Trace {
    typename CnnEncoder<T>::Trace cnn;
    Mat<T> visual;
    typename LstmStack<T>::Trace encoder;
    Mat<T> logits, probs;
  };

  IntentNet() = default;
  explicit IntentNet(const IntentNetConfig& cfg) : cfg_(cfg) {
    if (cfg.spots < 1 || cfg.n_hist < 1 || cfg.hidden < 1) throw ShapeError("IntentNet: invalid configuration");
    const auto step_in = static_cast<std::size_t>(3 + (cfg.use_cnn ? cfg.cnn_features : 0));
    if (cfg.use_cnn) cnn_ = CnnEncoder<T>("intent.cnn", cfg.bev_height, cfg.bev_width, cfg.cnn_features);
    encoder_ = LstmStack<T>("intent.encoder", cfg.layers, step_in, static_cast<std::size_t>(cfg.hidden),
                            static_cast<std::size_t>(3 * cfg.spots));
    head_ = nn::Dense<T>("intent.head", static_cast<std::size_t>(cfg.hidden), static_cast<std::size_t>(cfg.spots + 1));
  }

  const IntentNetConfig& config() const { return cfg_; }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    if (cnn_) cnn_->init(rng);
    encoder_.init(rng);
    head_.init(rng);
  }

  /// Returns the (G+1) x B predicted distributions.
  Mat<T> forward(const Batch<T>& b, Trace& tr) const {
    check(b);
    const Mat<T>* visual = nullptr;
    if (cnn_) {
      tr.visual = cnn_->forward(detail::stack_images(b.images), tr.cnn);
      visual = &tr.visual;
    }
    encoder_.forward(detail::encoder_inputs(b.poses, visual), &b.occupancy, tr.encoder);
    tr.logits = head_.forward(encoder_.final_h(tr.encoder));
    tr.probs = nn::softmax(tr.logits);
    return tr.probs;
  }

  Mat<T> forward(const Batch<T>& b) const {
    Trace tr;
    return forward(b, tr);
  }

  void backward(Trace& tr, const Mat<T>& dlogits) {
    Mat<T> dh = head_.backward(encoder_.final_h(tr.encoder), dlogits);
    std::vector<Mat<T>> dtop(tr.encoder.outputs.back().size());
    dtop.back() = std::move(dh);
    auto g = encoder_.backward(tr.encoder, std::move(dtop), {}, {});
    if (cnn_) cnn_->backward(tr.cnn, detail::visual_grad(g.dinputs, static_cast<Eigen::Index>(cfg_.cnn_features)));
  }

  nn::ParameterList<T> parameters() {
    nn::ParameterList<T> out;
    if (cnn_) cnn_->collect(out);
    encoder_.collect(out);
    head_.collect(out);
    return out;
  }

  nn::Dense<T>& head() { return head_; }

 private:
  void check(const Batch<T>& b) const {
    if (b.spots != cfg_.spots) throw ShapeError("IntentNet: lot size differs from the model");
    if (static_cast<int>(b.poses.size()) != cfg_.n_hist) throw ShapeError("IntentNet: history length differs from the model");
    if (cnn_ && b.images.size() != b.poses.size()) throw ShapeError("IntentNet: CNN model needs BEV frames");
  }

  IntentNetConfig cfg_;
  std::optional<CnnEncoder<T>> cnn_;
  LstmStack<T> encoder_;
  nn::Dense<T> head_;
};

// ---------------------------------------------------------------------------------------------
// Trajectory network

template <typename T>
class TrajNet {
 public:
  struct Trace {
    typename CnnEncoder<T>::Trace cnn;
    Mat<T> visual;
    typename LstmStack<T>::Trace encoder;
    typename nn::Lstm<T>::Trace decoder;
    std::vector<Mat<T>> hidden;   // decoder h per step
    std::vector<Mat<T>> outputs;  // predicted ego poses (scaled) per step
  };

  TrajNet() = default;
  explicit TrajNet(const TrajNetConfig& cfg) : cfg_(cfg) {
    if (cfg.n_hist < 1 || cfg.n_pred < 1 || cfg.hidden < 1) throw ShapeError("TrajNet: invalid configuration");
    if (cfg.decoder_layers != 1) throw ShapeError("TrajNet: only a single decoder layer is supported");
    const auto step_in = static_cast<std::size_t>(3 + (cfg.use_cnn ? cfg.cnn_features : 0));
    if (cfg.use_cnn) cnn_ = CnnEncoder<T>("traj.cnn", cfg.bev_height, cfg.bev_width, cfg.cnn_features);
    encoder_ = LstmStack<T>("traj.encoder", cfg.encoder_layers, step_in, static_cast<std::size_t>(cfg.hidden));
    decoder_ = nn::Lstm<T>("traj.decoder", 6, static_cast<std::size_t>(cfg.hidden));
    head_ = nn::Dense<T>("traj.head", static_cast<std::size_t>(cfg.hidden), 3);
  }

  const TrajNetConfig& config() const { return cfg_; }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    if (cnn_) cnn_->init(rng);
    encoder_.init(rng);
    decoder_.init(rng);
    head_.init(rng);
  }

  /// cond: 3 x B conditioning. Returns n_pred poses (3 x B, scaled ego frame).
  const std::vector<Mat<T>>& forward(const Batch<T>& b, const Mat<T>& cond, Trace& tr) const {
    if (static_cast<int>(b.poses.size()) != cfg_.n_hist) throw ShapeError("TrajNet: history length differs from the model");
    if (cond.rows() != 3 || cond.cols() != b.size) throw ShapeError("TrajNet: conditioning must be 3 x B");
    if (cnn_ && b.images.size() != b.poses.size()) throw ShapeError("TrajNet: CNN model needs BEV frames");
    const Mat<T>* visual = nullptr;
    if (cnn_) {
      tr.visual = cnn_->forward(detail::stack_images(b.images), tr.cnn);
      visual = &tr.visual;
    }
    encoder_.forward(detail::encoder_inputs(b.poses, visual), nullptr, tr.encoder);
    Mat<T> h = encoder_.final_h(tr.encoder);
    Mat<T> c = encoder_.final_c(tr.encoder);
    decoder_.begin(tr.decoder, nullptr, b.size);
    tr.hidden.clear();
    tr.outputs.clear();
    // The last history pose is the ego origin.
    Mat<T> x(6, b.size);
    x.topRows(3).setZero();
    x.bottomRows(3) = cond;
    for (int k = 0; k < cfg_.n_pred; ++k) {
      std::tie(h, c) = decoder_.step(tr.decoder, x, h, c);
      tr.hidden.push_back(h);
      tr.outputs.push_back(head_.forward(h));
      x.topRows(3) = tr.outputs.back();
    }
    return tr.outputs;
  }

  void backward(Trace& tr, const std::vector<Mat<T>>& doutputs) {
    const auto b = tr.outputs.front().cols();
    const auto hsz = static_cast<Eigen::Index>(cfg_.hidden);
    Mat<T> dprev = Mat<T>::Zero(3, b);
    Mat<T> dh_next = Mat<T>::Zero(hsz, b), dc_next = Mat<T>::Zero(hsz, b);
    Mat<T> unused;
    for (int k = cfg_.n_pred; k-- > 0;) {
      const auto ku = static_cast<std::size_t>(k);
      Mat<T> dy = doutputs[ku] + dprev;
      Mat<T> dh = head_.backward(tr.hidden[ku], dy) + dh_next;
      auto g = decoder_.step_backward(tr.decoder, ku, dh, dc_next, unused);
      dprev = g.dx.topRows(3);
      dh_next = std::move(g.dh_prev);
      dc_next = std::move(g.dc_prev);
    }
    auto g = encoder_.backward(tr.encoder, {}, dh_next, dc_next);
    if (cnn_) cnn_->backward(tr.cnn, detail::visual_grad(g.dinputs, static_cast<Eigen::Index>(cfg_.cnn_features)));
  }

  nn::ParameterList<T> parameters() {
    nn::ParameterList<T> out;
    if (cnn_) cnn_->collect(out);
    encoder_.collect(out);
    decoder_.collect(out);
    head_.collect(out);
    return out;
  }

 private:
  TrajNetConfig cfg_;
  std::optional<CnnEncoder<T>> cnn_;
  LstmStack<T> encoder_;
  nn::Lstm<T> decoder_;
  nn::Dense<T> head_;
};

// ---------------------------------------------------------------------------------------------
// Losses

struct IntentLossTerms {
  double cross_entropy = 0.0;     // J1
  double negative_entropy = 0.0;  // J2
  double occupied_penalty = 0.0;  // J3
  double total() const { return cross_entropy + negative_entropy + occupied_penalty; }
};

/// J1 + J2 + J3 for one distribution over G+1 categories. `free_flags` has G entries.
template <typename P, typename F>
IntentLossTerms intent_loss_terms(const P& g_hat, int label, const F& free_flags) {
  const auto n = static_cast<Eigen::Index>(g_hat.size());
  if (static_cast<Eigen::Index>(free_flags.size()) + 1 != n) throw ShapeError("intent_loss: need G free flags for G+1 categories");
  if (label < 0 || label >= n) throw ShapeError("intent_loss: label out of range");
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) sum += static_cast<double>(g_hat[j]);
  if (std::abs(sum - 1.0) > 1e-4) throw DataError("intent_loss: prediction is not normalized");
  IntentLossTerms t;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double p = static_cast<double>(g_hat[j]);
    const double logp = std::log(std::max(p, nn::kProbabilityClamp));
    if (j == label) t.cross_entropy = -logp;
    t.negative_entropy += p * logp;
    if (j + 1 < n) t.occupied_penalty += std::max(p - static_cast<double>(free_flags[j]), 0.0);
  }
  return t;
}

inline IntentLossTerms intent_loss_terms(const std::vector<double>& g_hat, int label, const std::vector<double>& free_flags) {
  return intent_loss_terms(Eigen::Map<const Eigen::VectorXd>(g_hat.data(), static_cast<Eigen::Index>(g_hat.size())), label,
                           Eigen::Map<const Eigen::VectorXd>(free_flags.data(), static_cast<Eigen::Index>(free_flags.size())));
}

/// Batch-mean J^intent and its gradient with respect to the logits.
template <typename T>
double intent_loss(const Mat<T>& probs, const std::vector<int>& labels, const Mat<T>& free_flags, Mat<T>* dlogits) {
  const auto b = probs.cols();
  if (static_cast<Eigen::Index>(labels.size()) != b || free_flags.cols() != b || free_flags.rows() + 1 != probs.rows())
    throw ShapeError("intent_loss: batch shapes disagree");
  double total = 0.0;
  Mat<T> dp(probs.rows(), b);
  const T inv_b = T(1) / static_cast<T>(b);
  for (Eigen::Index n = 0; n < b; ++n) {
    total += intent_loss_terms(probs.col(n), labels[static_cast<std::size_t>(n)], free_flags.col(n)).total();
    if (!dlogits) continue;
    for (Eigen::Index j = 0; j < probs.rows(); ++j) {
      const T p = probs(j, n);
      const bool clamped = static_cast<double>(p) <= nn::kProbabilityClamp;
      T d = clamped ? static_cast<T>(std::log(nn::kProbabilityClamp)) : std::log(p) + T(1);
      if (j == labels[static_cast<std::size_t>(n)] && !clamped) d -= T(1) / p;
      if (j + 1 < probs.rows() && p > free_flags(j, n)) d += T(1);
      dp(j, n) = d * inv_b;
    }
  }
  if (dlogits) *dlogits = nn::softmax_backward(probs, dp);
  return total / static_cast<double>(b);
}

/// Mean Euclidean position error over the horizon; heading ignored.
inline double traj_loss(const std::vector<Pose>& predicted, const std::vector<Pose>& truth) {
  if (predicted.size() != truth.size() || predicted.empty()) throw ShapeError("traj_loss: trajectories must have equal, nonzero length");
  double s = 0.0;
  for (std::size_t k = 0; k < truth.size(); ++k) s += std::hypot(predicted[k].x - truth[k].x, predicted[k].y - truth[k].y);
  return s / static_cast<double>(truth.size());
}

/// Batch-mean J^traj in meters on scaled ego-frame outputs, with gradients on the outputs.
template <typename T>
double traj_loss(const std::vector<Mat<T>>& predicted, const std::vector<Mat<T>>& truth, std::vector<Mat<T>>* doutputs) {
  if (predicted.size() != truth.size() || predicted.empty()) throw ShapeError("traj_loss: horizon mismatch");
  const auto b = predicted.front().cols();
  const double inv_scale = 1.0 / kPositionScale;
  const double w = 1.0 / (static_cast<double>(predicted.size()) * static_cast<double>(b));
  double total = 0.0;
  if (doutputs) doutputs->assign(predicted.size(), Mat<T>::Zero(3, b));
  for (std::size_t k = 0; k < predicted.size(); ++k) {
    if (truth[k].cols() != b || predicted[k].rows() != 3) throw ShapeError("traj_loss: shape mismatch");
    for (Eigen::Index n = 0; n < b; ++n) {
      const double dx = (static_cast<double>(predicted[k](0, n)) - static_cast<double>(truth[k](0, n))) * inv_scale;
      const double dy = (static_cast<double>(predicted[k](1, n)) - static_cast<double>(truth[k](1, n))) * inv_scale;
      const double d = std::hypot(dx, dy);
      total += d;
      if (doutputs && d > 0.0) {
        (*doutputs)[k](0, n) = static_cast<T>(w * inv_scale * dx / d);
        (*doutputs)[k](1, n) = static_cast<T>(w * inv_scale * dy / d);
      }
    }
  }
  return total * w;
}

// ---------------------------------------------------------------------------------------------
// Prediction

enum class Architecture { kLstm, kCnn };
enum class Variant { kMultimodal, kGtIntent, kNoIntent };

inline std::string to_string(Architecture a) { return a == Architecture::kLstm ? "lstm" : "cnn"; }
inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kMultimodal: return "multimodal";
    case Variant::kGtIntent: return "gt_intent";
    case Variant::kNoIntent: return "no_intent";
  }
  return "?";
}
inline Architecture architecture_from_string(const std::string& s) {
  if (s == "lstm") return Architecture::kLstm;
  if (s == "cnn") return Architecture::kCnn;
  throw DataError("unknown model architecture '" + s + "'");
}
inline Variant variant_from_string(const std::string& s) {
  if (s == "multimodal") return Variant::kMultimodal;
  if (s == "gt_intent") return Variant::kGtIntent;
  if (s == "no_intent") return Variant::kNoIntent;
  throw DataError("unknown model variant '" + s + "'");
}

struct Rollout {
  int intent_index = 0;  // 0-based category; G = undetermined
  double probability = 0.0;
  std::vector<Pose> trajectory;  // world frame
};

struct PredictionResult {
  std::vector<double> intent;
  std::vector<Rollout> rollouts;
};

inline void to_json(nlohmann::json& j, const PredictionResult& r) {
  j = nlohmann::json::object();
  j["intent"] = r.intent;
  auto& rs = j["rollouts"] = nlohmann::json::array();
  for (const auto& ro : r.rollouts) {
    nlohmann::json traj = nlohmann::json::array();
    for (const auto& p : ro.trajectory) traj.push_back({p.x, p.y, p.theta});
    rs.push_back({{"intent_index", ro.intent_index + 1}, {"probability", ro.probability}, {"trajectory", traj}});
  }
}

/// Indices of the n largest entries, descending; ties go to the lower index.
inline std::vector<int> top_indices(const std::vector<double>& p, int n) {
  std::vector<int> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)]; });
  idx.resize(static_cast<std::size_t>(std::min<int>(n, static_cast<int>(idx.size()))));
  return idx;
}

/// Converts scaled ego-frame decoder outputs for column n back to world poses.
template <typename T>
std::vector<Pose> to_world_trajectory(const std::vector<Mat<T>>& outputs, const EgoFrame& frame, Eigen::Index n) {
  std::vector<Pose> out;
  out.reserve(outputs.size());
  for (const auto& o : outputs)
    out.push_back(frame.to_world({static_cast<double>(o(0, n)) / kPositionScale, static_cast<double>(o(1, n)) / kPositionScale,
                                  static_cast<double>(o(2, n))}));
  return out;
}

/// Intent distribution plus one rollout for each of the n most likely categories, for every
/// example in the batch.
template <typename T>
std::vector<PredictionResult> predict_multimodal(const IntentNet<T>& intent, const TrajNet<T>& traj, const Batch<T>& b, int n) {
  if (n < 1 || n > b.spots + 1) throw ShapeError("predict_multimodal: n must be in 1..G+1");
  const Mat<T> probs = intent.forward(b);
  std::vector<PredictionResult> results(static_cast<std::size_t>(b.size));
  std::vector<std::vector<int>> tops(static_cast<std::size_t>(b.size));
  for (int i = 0; i < b.size; ++i) {
    auto& r = results[static_cast<std::size_t>(i)];
    r.intent.resize(static_cast<std::size_t>(probs.rows()));
    for (Eigen::Index j = 0; j < probs.rows(); ++j) r.intent[static_cast<std::size_t>(j)] = static_cast<double>(probs(j, i));
    tops[static_cast<std::size_t>(i)] = top_indices(r.intent, n);
  }
  for (int rank = 0; rank < n; ++rank) {
    std::vector<int> cats(static_cast<std::size_t>(b.size));
    for (int i = 0; i < b.size; ++i) cats[static_cast<std::size_t>(i)] = tops[static_cast<std::size_t>(i)][static_cast<std::size_t>(rank)];
    typename TrajNet<T>::Trace tr;
    const auto& outs = traj.forward(b, b.conditioning(cats), tr);
    for (int i = 0; i < b.size; ++i) {
      auto& r = results[static_cast<std::size_t>(i)];
      const int j = cats[static_cast<std::size_t>(i)];
      r.rollouts.push_back({j, r.intent[static_cast<std::size_t>(j)], to_world_trajectory(outs, b.frames[static_cast<std::size_t>(i)], i)});
    }
  }
  return results;
}

/// Single rollout per example under explicit conditioning categories (G or zero conditioning => undetermined).
template <typename T>
std::vector<std::vector<Pose>> predict_conditioned(const TrajNet<T>& traj, const Batch<T>& b, const Mat<T>& cond) {
  typename TrajNet<T>::Trace tr;
  const auto& outs = traj.forward(b, cond, tr);
  std::vector<std::vector<Pose>> res;
  for (int i = 0; i < b.size; ++i) res.push_back(to_world_trajectory(outs, b.frames[static_cast<std::size_t>(i)], i));
  return res;
}

// ---------------------------------------------------------------------------------------------
// Checkpoint sidecars

struct ModelSidecar {
  std::string kind;  // "intent" | "traj"
  Architecture architecture = Architecture::kLstm;
  Variant variant = Variant::kMultimodal;
  nlohmann::json config;
  nlohmann::json extra = nlohmann::json::object();
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& base) {
  return std::filesystem::path(base.string() + ".model.json");
}

inline void save_sidecar(const std::filesystem::path& base, const ModelSidecar& s) {
  nlohmann::json j = {{"kind", s.kind},       {"architecture", to_string(s.architecture)},
                      {"variant", to_string(s.variant)}, {"config", s.config},
                      {"extra", s.extra}};
  std::ofstream out(sidecar_path(base), std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("save_sidecar: cannot write " + sidecar_path(base).string());
}

inline ModelSidecar load_sidecar(const std::filesystem::path& base) {
  std::ifstream in(sidecar_path(base));
  if (!in) throw DataError("missing model sidecar " + sidecar_path(base).string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    ModelSidecar s;
    s.kind = j.at("kind").get<std::string>();
    s.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    s.variant = variant_from_string(j.at("variant").get<std::string>());
    s.config = j.at("config");
    s.extra = j.value("extra", nlohmann::json::object());
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model sidecar: ") + e.what());
  }
}

template <typename T>
void save_intent_net(const std::filesystem::path& base, IntentNet<T>& net, Variant variant) {
  nn::save_checkpoint(base, net.parameters());
  save_sidecar(base, {"intent", net.config().use_cnn ? Architecture::kCnn : Architecture::kLstm, variant, net.config()});
}

template <typename T>
void save_traj_net(const std::filesystem::path& base, TrajNet<T>& net, Variant variant) {
  nn::save_checkpoint(base, net.parameters());
  save_sidecar(base, {"traj", net.config().use_cnn ? Architecture::kCnn : Architecture::kLstm, variant, net.config()});
}

template <typename T>
IntentNet<T> load_intent_net(const std::filesystem::path& base) {
  const auto sc = load_sidecar(base);
  if (sc.kind != "intent") throw DataError("checkpoint " + base.string() + " is not an intent model");
  IntentNet<T> net(sc.config.get<IntentNetConfig>());
  nn::load_checkpoint(base, net.parameters());
  return net;
}

template <typename T>
TrajNet<T> load_traj_net(const std::filesystem::path& base) {
  const auto sc = load_sidecar(base);
  if (sc.kind != "traj") throw DataError("checkpoint " + base.string() + " is not a trajectory model");
  TrajNet<T> net(sc.config.get<TrajNetConfig>());
  nn::load_checkpoint(base, net.parameters());
  return net;
}

}  // namespace parkpredict

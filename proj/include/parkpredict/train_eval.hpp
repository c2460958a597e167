#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "parkpredict/dataset.hpp"
#include "parkpredict/ekf.hpp"
#include "parkpredict/metrics.hpp"
#include "parkpredict/models.hpp"
#include "parkpredict/nn/adam.hpp"

namespace parkpredict {

inline constexpr int kReportedTopN = 5;
// Snippets whose heading changes by at least this much over the prediction horizon count as curved.
inline constexpr double kCurvedHeadingChange = 0.35;

struct TrainConfig {
  int epochs = 200;
  int batch_size = 32;
  int folds = 5;
  double learning_rate = 1e-3;
  double clip_norm = 5.0;  // 0 disables
  double weight_decay = 0.0;
  bool mirror_augment = true;  // random lot reflections of each training snippet
  int hidden = 64;
  std::uint64_t seed = 1;
  int threads = 1;

  static TrainConfig desk() {
    TrainConfig c;
    c.epochs = 40;
    return c;
  }
  static TrainConfig paper() { return TrainConfig{}; }

  void validate() const {
    if (epochs < 1 || batch_size < 1 || folds < 1) throw DataError("TrainConfig: epochs, batch_size and folds must be >= 1");
    if (!(learning_rate > 0.0) || hidden < 1) throw DataError("TrainConfig: learning_rate and hidden must be positive");
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, folds, learning_rate, clip_norm, weight_decay,
                                                mirror_augment, hidden, seed, threads)

/// Which rows to produce.
struct RunSpec {
  bool ekf = true;
  std::vector<Architecture> architectures{Architecture::kLstm};
  std::vector<Variant> variants{Variant::kMultimodal, Variant::kGtIntent, Variant::kNoIntent};
  int rollouts = 3;
  std::optional<std::filesystem::path> checkpoint_dir;

  bool wants(Variant v) const { return std::find(variants.begin(), variants.end(), v) != variants.end(); }
};

inline nlohmann::json run_spec_json(const RunSpec& s) {
  nlohmann::json archs = nlohmann::json::array(), vars = nlohmann::json::array();
  for (auto a : s.architectures) archs.push_back(to_string(a));
  for (auto v : s.variants) vars.push_back(to_string(v));
  return {{"ekf", s.ekf}, {"architectures", archs}, {"variants", vars}, {"rollouts", s.rollouts}};
}

struct MetricBlock {
  std::size_t count = 0;
  std::vector<double> accuracy;  // A_1..A_5; empty for rows without an intent output
  std::vector<double> d;         // d_1..d_Npred
  std::vector<double> d_top1;    // multimodal rows: top-1 rollout only
  std::size_t curved_count = 0;
  std::vector<double> d_curved;
  std::vector<double> d_top1_curved;
};

struct ModelReport {
  std::string model;    // ekf | lstm | cnn
  std::string variant;  // baseline | multimodal | gt_intent | no_intent
  std::vector<MetricBlock> folds;
  MetricBlock pooled;
  nlohmann::json training;  // per-fold epoch losses, null for the EKF
};

struct EvalReport {
  nlohmann::json meta;
  std::vector<ModelReport> models;

  const ModelReport& row(const std::string& model, const std::string& variant) const {
    for (const auto& m : models)
      if (m.model == model && m.variant == variant) return m;
    throw DataError("EvalReport: no row " + model + "/" + variant);
  }
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Independent stream seed for (base, fold, epoch, tag).
inline std::uint64_t derive_seed(std::uint64_t base, int fold, int epoch, int tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32), static_cast<std::uint32_t>(fold),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(tag)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline nlohmann::json block_json(const MetricBlock& b) {
  nlohmann::json j = {{"count", b.count}, {"d", b.d}, {"curved_count", b.curved_count}, {"d_curved", b.d_curved}};
  j["accuracy"] = b.accuracy.empty() ? nlohmann::json(nullptr) : nlohmann::json(b.accuracy);
  j["d_top1"] = b.d_top1.empty() ? nlohmann::json(nullptr) : nlohmann::json(b.d_top1);
  j["d_top1_curved"] = b.d_top1_curved.empty() ? nlohmann::json(nullptr) : nlohmann::json(b.d_top1_curved);
  return j;
}

inline MetricBlock block_from_json(const nlohmann::json& j) {
  MetricBlock b;
  b.count = j.at("count").get<std::size_t>();
  b.d = j.at("d").get<std::vector<double>>();
  b.curved_count = j.at("curved_count").get<std::size_t>();
  b.d_curved = j.at("d_curved").get<std::vector<double>>();
  if (!j.at("accuracy").is_null()) b.accuracy = j.at("accuracy").get<std::vector<double>>();
  if (!j.at("d_top1").is_null()) b.d_top1 = j.at("d_top1").get<std::vector<double>>();
  if (!j.at("d_top1_curved").is_null()) b.d_top1_curved = j.at("d_top1_curved").get<std::vector<double>>();
  return b;
}

inline std::vector<double> weighted_mean(const std::vector<std::pair<std::size_t, const std::vector<double>*>>& parts) {
  std::vector<double> out;
  std::size_t total = 0;
  for (const auto& [n, v] : parts) {
    if (n == 0 || v->empty()) continue;
    if (out.empty()) out.assign(v->size(), 0.0);
    for (std::size_t k = 0; k < v->size(); ++k) out[k] += static_cast<double>(n) * (*v)[k];
    total += n;
  }
  for (auto& x : out) x /= static_cast<double>(total);
  return out;
}

}  // namespace detail

/// Instance-weighted combination of per-fold blocks.
inline MetricBlock pool_blocks(const std::vector<MetricBlock>& folds) {
  MetricBlock p;
  std::vector<std::pair<std::size_t, const std::vector<double>*>> acc, d, d1, dc, d1c;
  for (const auto& f : folds) {
    p.count += f.count;
    p.curved_count += f.curved_count;
    acc.emplace_back(f.count, &f.accuracy);
    d.emplace_back(f.count, &f.d);
    d1.emplace_back(f.count, &f.d_top1);
    dc.emplace_back(f.curved_count, &f.d_curved);
    d1c.emplace_back(f.curved_count, &f.d_top1_curved);
  }
  p.accuracy = detail::weighted_mean(acc);
  p.d = detail::weighted_mean(d);
  p.d_top1 = detail::weighted_mean(d1);
  p.d_curved = detail::weighted_mean(dc);
  p.d_top1_curved = detail::weighted_mean(d1c);
  return p;
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& m : r.models) {
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : m.folds) folds.push_back(detail::block_json(f));
    rows.push_back({{"model", m.model},
                    {"variant", m.variant},
                    {"folds", folds},
                    {"pooled", detail::block_json(m.pooled)},
                    {"training", m.training}});
  }
  return {{"meta", r.meta}, {"models", rows}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.meta = j.at("meta");
  for (const auto& row : j.at("models")) {
    ModelReport m;
    m.model = row.at("model").get<std::string>();
    m.variant = row.at("variant").get<std::string>();
    for (const auto& f : row.at("folds")) m.folds.push_back(detail::block_from_json(f));
    m.pooled = detail::block_from_json(row.at("pooled"));
    m.training = row.at("training");
    r.models.push_back(std::move(m));
  }
  return r;
}

/// Flat CSV: model,variant,fold,metric,index,value. `fold` is a number or "pooled".
inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "model,variant,fold,metric,index,value\n";
  auto emit = [&](const ModelReport& m, const std::string& fold, const MetricBlock& b) {
    auto series = [&](const char* name, const std::vector<double>& v) {
      for (std::size_t i = 0; i < v.size(); ++i)
        os << m.model << ',' << m.variant << ',' << fold << ',' << name << ',' << i + 1 << ',' << v[i] << '\n';
    };
    os << m.model << ',' << m.variant << ',' << fold << ",count,0," << b.count << '\n';
    series("A", b.accuracy);
    series("d", b.d);
    series("d_top1", b.d_top1);
    os << m.model << ',' << m.variant << ',' << fold << ",curved_count,0," << b.curved_count << '\n';
    series("d_curved", b.d_curved);
    series("d_top1_curved", b.d_top1_curved);
  };
  for (const auto& m : r.models) {
    for (std::size_t f = 0; f < m.folds.size(); ++f) emit(m, std::to_string(f + 1), m.folds[f]);
    emit(m, "pooled", m.pooled);
  }
  return os.str();
}

/// Bar-chart series of pooled A_n (one line per model row and n).
inline std::string accuracy_plot_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "model,variant,n,accuracy\n";
  for (const auto& m : r.models)
    for (std::size_t n = 0; n < m.pooled.accuracy.size(); ++n)
      os << m.model << ',' << m.variant << ',' << n + 1 << ',' << m.pooled.accuracy[n] << '\n';
  return os.str();
}

/// Pooled d_k curves against prediction time.
inline std::string distance_plot_csv(const EvalReport& r, double dt) {
  std::ostringstream os;
  os << std::setprecision(17) << "model,variant,k,time_s,d,d_curved\n";
  for (const auto& m : r.models)
    for (std::size_t k = 0; k < m.pooled.d.size(); ++k)
      os << m.model << ',' << m.variant << ',' << k + 1 << ',' << static_cast<double>(k + 1) * dt << ',' << m.pooled.d[k] << ','
         << (k < m.pooled.d_curved.size() ? std::to_string(m.pooled.d_curved[k]) : std::string()) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------------------------
// Folds on disk

inline nlohmann::json folds_json(const FoldSplit& s, std::uint64_t seed) {
  return {{"folds", s.folds}, {"seed", seed}, {"demo_fold", s.demo_fold}};
}

inline FoldSplit folds_from_json(const nlohmann::json& j, const Dataset& ds) {
  FoldSplit s;
  s.folds = j.at("folds").get<int>();
  s.demo_fold = j.at("demo_fold").get<std::map<std::string, int>>();
  for (const auto& sn : ds.snippets) {
    const auto it = s.demo_fold.find(sn.demo_id);
    if (it == s.demo_fold.end()) throw DataError("folds file does not cover demonstration '" + sn.demo_id + "'");
    s.assignment.push_back(it->second);
  }
  return s;
}

// ---------------------------------------------------------------------------------------------
// Training

using Logger = std::function<void(const std::string&)>;

namespace detail {

inline std::vector<const Snippet*> gather(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t begin,
                                          std::size_t end) {
  std::vector<const Snippet*> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) out.push_back(&ds.snippets[idx[i]]);
  return out;
}

inline std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& train, std::uint64_t seed) {
  std::vector<std::size_t> order = train;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

template <typename Step>
std::vector<double> train_loop(const Dataset& ds, const std::vector<std::size_t>& train, const TrainConfig& cfg, int fold,
                               Step&& step, const Logger& log, const std::string& label) {
  if (train.empty()) throw DataError("training set is empty");
  std::vector<double> losses;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(train, derive_seed(cfg.seed, fold, epoch, 0));
    double sum = 0.0;
    std::size_t batches = 0;
    // Reflection codes: bit 0 flips x, bit 1 flips y (only for lots with an even row count).
    std::mt19937_64 flips(derive_seed(cfg.seed, fold, epoch, 1));
    std::uniform_int_distribution<int> code(0, ds.lot.rows % 2 == 0 ? 3 : 1);
    std::vector<Snippet> mirrored;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      auto batch = gather(ds, order, b, std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size)));
      if (cfg.mirror_augment) {
        mirrored.clear();
        mirrored.reserve(batch.size());
        for (auto& p : batch) {
          const int c = code(flips);
          if (c == 0) continue;
          mirrored.push_back(mirror_snippet(*p, ds.lot, c & 1, c & 2, ds.cfg.bev_height, ds.cfg.bev_width));
          p = &mirrored.back();
        }
      }
      sum += step(batch);
      ++batches;
    }
    losses.push_back(sum / static_cast<double>(batches));
    if (log && (epoch + 1 == cfg.epochs || (epoch + 1) % 10 == 0))
      log("fold " + std::to_string(fold) + " " + label + " epoch " + std::to_string(epoch + 1) + "/" +
          std::to_string(cfg.epochs) + " loss " + std::to_string(losses.back()));
  }
  return losses;
}

}  // namespace detail

inline IntentNetConfig intent_config_for(const Dataset& ds, Architecture arch, const TrainConfig& cfg) {
  IntentNetConfig c;
  c.spots = ds.lot.spot_count();
  c.n_hist = ds.cfg.n_hist;
  c.hidden = cfg.hidden;
  c.use_cnn = arch == Architecture::kCnn;
  c.bev_height = ds.cfg.bev_height;
  c.bev_width = ds.cfg.bev_width;
  return c;
}

inline TrajNetConfig traj_config_for(const Dataset& ds, Architecture arch, const TrainConfig& cfg) {
  TrajNetConfig c;
  c.n_hist = ds.cfg.n_hist;
  c.n_pred = ds.cfg.n_pred;
  c.hidden = cfg.hidden;
  c.use_cnn = arch == Architecture::kCnn;
  c.bev_height = ds.cfg.bev_height;
  c.bev_width = ds.cfg.bev_width;
  return c;
}

inline nn::AdamConfig adam_config(const TrainConfig& cfg) {
  nn::AdamConfig a;
  a.lr = cfg.learning_rate;
  a.weight_decay = cfg.weight_decay;
  return a;
}

/// Trains the intent network on J^intent; returns per-epoch mean loss.
inline std::vector<double> train_intent(IntentNet<float>& net, const Dataset& ds, const std::vector<std::size_t>& train,
                                        const TrainConfig& cfg, int fold, const Logger& log = {}) {
  const auto params = net.parameters();
  nn::Adam<float> opt(params, adam_config(cfg));
  const bool images = net.config().use_cnn;
  typename IntentNet<float>::Trace tr;
  return detail::train_loop(
      ds, train, cfg, fold,
      [&](const std::vector<const Snippet*>& snippets) {
        const auto b = make_batch<float>(snippets, ds.cfg.n_hist, ds.cfg.n_pred, images, ds.cfg.bev_height, ds.cfg.bev_width);
        const Mat<float> probs = net.forward(b, tr);
        Mat<float> dlogits;
        const double loss = intent_loss(probs, b.labels, b.free_flags, &dlogits);
        nn::zero_grads(params);
        net.backward(tr, dlogits);
        nn::clip_grad_norm(params, cfg.clip_norm);
        opt.step();
        return loss;
      },
      log, "intent");
}

/// Trains the trajectory network on J^traj with ground-truth conditioning, or with zero
/// conditioning when `zero_conditioning` is set.
inline std::vector<double> train_traj(TrajNet<float>& net, const Dataset& ds, const std::vector<std::size_t>& train,
                                      const TrainConfig& cfg, int fold, bool zero_conditioning, const Logger& log = {}) {
  const auto params = net.parameters();
  nn::Adam<float> opt(params, adam_config(cfg));
  const bool images = net.config().use_cnn;
  typename TrajNet<float>::Trace tr;
  return detail::train_loop(
      ds, train, cfg, fold,
      [&](const std::vector<const Snippet*>& snippets) {
        const auto b = make_batch<float>(snippets, ds.cfg.n_hist, ds.cfg.n_pred, images, ds.cfg.bev_height, ds.cfg.bev_width);
        const Mat<float> cond = zero_conditioning ? b.zero_conditioning() : b.conditioning(b.labels);
        const auto& outs = net.forward(b, cond, tr);
        std::vector<Mat<float>> douts;
        const double loss = traj_loss(outs, b.future, &douts);
        nn::zero_grads(params);
        net.backward(tr, douts);
        nn::clip_grad_norm(params, cfg.clip_norm);
        opt.step();
        return loss;
      },
      log, zero_conditioning ? "traj_no_intent" : "traj");
}

// ---------------------------------------------------------------------------------------------
// Evaluation

inline std::vector<Pose> snippet_poses(const std::vector<float>& flat) {
  std::vector<Pose> out;
  for (std::size_t i = 0; i + 2 < flat.size(); i += 3) out.push_back({flat[i], flat[i + 1], flat[i + 2]});
  return out;
}

inline OccupancyMatrix snippet_occupancy(const Snippet& s) {
  OccupancyMatrix o;
  for (std::size_t i = 0; i + 2 < s.occ.size(); i += 3) o.entries.push_back({s.occ[i], s.occ[i + 1], s.occ[i + 2] != 0.0f});
  return o;
}

inline bool is_curved(const Snippet& s) {
  const double start = s.z_hist[s.z_hist.size() - 1];
  const double end = s.z_future[s.z_future.size() - 1];
  return std::abs(wrap_angle(end - start)) >= kCurvedHeadingChange;
}

/// Accumulates per-instance predictions into a MetricBlock.
class BlockBuilder {
 public:
  void add(const std::vector<Pose>& predicted, const std::vector<Pose>& truth, bool curved,
           const std::vector<Pose>* top1 = nullptr, const std::vector<double>* intent = nullptr, int label = -1) {
    pred_.push_back(predicted);
    truth_.push_back(truth);
    curved_.push_back(curved);
    if (top1) top1_.push_back(*top1);
    if (intent) {
      intents_.push_back(*intent);
      labels_.push_back(label);
    }
  }

  MetricBlock build() const {
    MetricBlock b;
    b.count = truth_.size();
    if (b.count == 0) return b;
    b.d = mean_distance_error(pred_, truth_);
    if (!top1_.empty()) b.d_top1 = mean_distance_error(top1_, truth_);
    if (!intents_.empty()) {
      const int max_n = std::min<int>(kReportedTopN, static_cast<int>(intents_.front().size()));
      for (int n = 1; n <= max_n; ++n) b.accuracy.push_back(top_n_accuracy(intents_, labels_, n));
    }
    std::vector<std::vector<Pose>> pc, tc, t1c;
    for (std::size_t i = 0; i < truth_.size(); ++i) {
      if (!curved_[i]) continue;
      pc.push_back(pred_[i]);
      tc.push_back(truth_[i]);
      if (!top1_.empty()) t1c.push_back(top1_[i]);
    }
    b.curved_count = tc.size();
    if (!tc.empty()) {
      b.d_curved = mean_distance_error(pc, tc);
      if (!t1c.empty()) b.d_top1_curved = mean_distance_error(t1c, tc);
    }
    return b;
  }

 private:
  std::vector<std::vector<Pose>> pred_, truth_, top1_;
  std::vector<bool> curved_;
  std::vector<std::vector<double>> intents_;
  std::vector<int> labels_;
};

/// Process noise fitted on the training snippets (history followed by future).
inline ekf::NoiseConfig fit_ekf_noise(const Dataset& ds, const std::vector<std::size_t>& train) {
  std::vector<std::vector<Pose>> seqs;
  seqs.reserve(train.size());
  for (const auto i : train) {
    auto seq = snippet_poses(ds.snippets[i].z_hist);
    const auto fut = snippet_poses(ds.snippets[i].z_future);
    seq.insert(seq.end(), fut.begin(), fut.end());
    seqs.push_back(std::move(seq));
  }
  ekf::NoiseConfig noise;
  noise.Q = ekf::estimate_Q(seqs, ds.cfg.dt);
  return noise;
}

inline MetricBlock evaluate_ekf(const Dataset& ds, const std::vector<std::size_t>& test, const ekf::NoiseConfig& noise) {
  BlockBuilder bb;
  for (const auto i : test) {
    const auto& s = ds.snippets[i];
    const auto hist = snippet_poses(s.z_hist);
    const auto truth = snippet_poses(s.z_future);
    const auto pred = ekf::ekf_predict(hist, ds.cfg.dt, noise, ds.cfg.n_pred);
    const auto intent = ekf::ekf_intent(pred.back(), snippet_occupancy(s));
    bb.add(pred, truth, is_curved(s), nullptr, &intent, s.intent_index());
  }
  return bb.build();
}

/// Trained networks of one architecture for one fold.
struct FoldModels {
  std::optional<IntentNet<float>> intent;
  std::optional<TrajNet<float>> traj;
  std::optional<TrajNet<float>> traj_no_intent;
};

/// Evaluates the requested variants; returns blocks in `variants` order.
inline std::vector<MetricBlock> evaluate_models(const Dataset& ds, const std::vector<std::size_t>& test, const FoldModels& m,
                                                const std::vector<Variant>& variants, int rollouts, bool images) {
  std::vector<BlockBuilder> builders(variants.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t begin = 0; begin < test.size(); begin += kChunk) {
    const auto snippets = detail::gather(ds, test, begin, std::min(test.size(), begin + kChunk));
    const auto b = make_batch<float>(snippets, ds.cfg.n_hist, ds.cfg.n_pred, images, ds.cfg.bev_height, ds.cfg.bev_width);
    std::vector<std::vector<Pose>> truth;
    for (const auto* s : snippets) truth.push_back(snippet_poses(s->z_future));
    for (std::size_t v = 0; v < variants.size(); ++v) {
      auto& bb = builders[v];
      switch (variants[v]) {
        case Variant::kMultimodal: {
          const auto res = predict_multimodal(*m.intent, *m.traj, b, rollouts);
          for (std::size_t i = 0; i < res.size(); ++i) {
            const auto best = best_of_n_selection(res[i].rollouts, truth[i]);
            bb.add(res[i].rollouts[best].trajectory, truth[i], is_curved(*snippets[i]), &res[i].rollouts.front().trajectory,
                   &res[i].intent, b.labels[i]);
          }
          break;
        }
        case Variant::kGtIntent: {
          const auto pred = predict_conditioned(*m.traj, b, b.conditioning(b.labels));
          for (std::size_t i = 0; i < pred.size(); ++i) bb.add(pred[i], truth[i], is_curved(*snippets[i]));
          break;
        }
        case Variant::kNoIntent: {
          const auto pred = predict_conditioned(*m.traj_no_intent, b, b.zero_conditioning());
          for (std::size_t i = 0; i < pred.size(); ++i) bb.add(pred[i], truth[i], is_curved(*snippets[i]));
          break;
        }
      }
    }
  }
  std::vector<MetricBlock> out;
  for (const auto& bb : builders) out.push_back(bb.build());
  return out;
}

namespace detail {

inline std::filesystem::path fold_dir(const std::filesystem::path& root, int fold) {
  return root / ("fold" + std::to_string(fold));
}

struct FoldOutcome {
  std::optional<MetricBlock> ekf;
  // [arch][variant]
  std::vector<std::vector<MetricBlock>> blocks;
  std::vector<nlohmann::json> training;  // per arch
};

inline void require_images(const Dataset& ds, const RunSpec& spec) {
  for (auto a : spec.architectures)
    if (a == Architecture::kCnn && !ds.cfg.include_bev) throw DataError("the CNN variant needs a dataset built with BEV frames");
}

inline int arch_tag(Architecture a) { return a == Architecture::kLstm ? 1 : 2; }

inline FoldOutcome train_fold(const Dataset& ds, const FoldSplit& split, int fold, const TrainConfig& cfg,
                              const RunSpec& spec, const Logger& log) {
  const auto train = split.complement(fold);
  const auto test = split.members(fold);
  if (test.empty() || train.empty()) throw DataError("fold " + std::to_string(fold) + " is empty");
  FoldOutcome out;
  const auto noise = fit_ekf_noise(ds, train);
  if (spec.ekf) out.ekf = evaluate_ekf(ds, test, noise);
  if (spec.checkpoint_dir) {
    std::filesystem::create_directories(fold_dir(*spec.checkpoint_dir, fold));
    std::ofstream(fold_dir(*spec.checkpoint_dir, fold) / "ekf_noise.json") << nlohmann::json(noise).dump(2) << '\n';
  }
  for (auto arch : spec.architectures) {
    FoldModels m;
    nlohmann::json training = nlohmann::json::object();
    const std::uint64_t init = derive_seed(cfg.seed, fold, -1, arch_tag(arch));
    if (spec.wants(Variant::kMultimodal)) {
      m.intent.emplace(intent_config_for(ds, arch, cfg));
      m.intent->init(init);
      training["intent"] = train_intent(*m.intent, ds, train, cfg, fold, log);
    }
    if (spec.wants(Variant::kMultimodal) || spec.wants(Variant::kGtIntent)) {
      m.traj.emplace(traj_config_for(ds, arch, cfg));
      m.traj->init(init + 1);
      training["traj"] = train_traj(*m.traj, ds, train, cfg, fold, false, log);
    }
    if (spec.wants(Variant::kNoIntent)) {
      m.traj_no_intent.emplace(traj_config_for(ds, arch, cfg));
      m.traj_no_intent->init(init + 1);
      training["traj_no_intent"] = train_traj(*m.traj_no_intent, ds, train, cfg, fold, true, log);
    }
    if (spec.checkpoint_dir) {
      const auto dir = fold_dir(*spec.checkpoint_dir, fold);
      std::filesystem::create_directories(dir);
      const auto name = to_string(arch);
      if (m.intent) save_intent_net(dir / (name + "_intent"), *m.intent, Variant::kMultimodal);
      if (m.traj) save_traj_net(dir / (name + "_traj"), *m.traj, Variant::kGtIntent);
      if (m.traj_no_intent) save_traj_net(dir / (name + "_traj_no_intent"), *m.traj_no_intent, Variant::kNoIntent);
      std::ofstream(dir / (name + "_training.json")) << training.dump(2) << '\n';
    }
    out.blocks.push_back(evaluate_models(ds, test, m, spec.variants, spec.rollouts, arch == Architecture::kCnn));
    out.training.push_back(std::move(training));
  }
  return out;
}

inline FoldOutcome load_fold(const Dataset& ds, const FoldSplit& split, int fold, const RunSpec& spec,
                             const std::filesystem::path& root) {
  const auto train = split.complement(fold);
  const auto test = split.members(fold);
  if (test.empty() || train.empty()) throw DataError("fold " + std::to_string(fold) + " is empty");
  FoldOutcome out;
  if (spec.ekf) out.ekf = evaluate_ekf(ds, test, fit_ekf_noise(ds, train));
  const auto dir = fold_dir(root, fold);
  for (auto arch : spec.architectures) {
    const auto name = to_string(arch);
    FoldModels m;
    if (spec.wants(Variant::kMultimodal)) m.intent.emplace(load_intent_net<float>(dir / (name + "_intent")));
    if (spec.wants(Variant::kMultimodal) || spec.wants(Variant::kGtIntent))
      m.traj.emplace(load_traj_net<float>(dir / (name + "_traj")));
    if (spec.wants(Variant::kNoIntent)) m.traj_no_intent.emplace(load_traj_net<float>(dir / (name + "_traj_no_intent")));
    if (m.intent && m.intent->config().spots != ds.lot.spot_count())
      throw ShapeError("checkpoint lot size does not match the dataset");
    nlohmann::json training = nlohmann::json::object();
    if (std::ifstream in(dir / (name + "_training.json")); in) training = nlohmann::json::parse(in);
    out.blocks.push_back(evaluate_models(ds, test, m, spec.variants, spec.rollouts, arch == Architecture::kCnn));
    out.training.push_back(std::move(training));
  }
  return out;
}

template <typename Fn>
std::vector<FoldOutcome> for_each_fold(int folds, int threads, Fn&& fn) {
  std::vector<FoldOutcome> out(static_cast<std::size_t>(folds));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(folds));
  std::atomic<int> next{1};
  auto worker = [&] {
    for (int f = next++; f <= folds; f = next++) {
      try {
        out[static_cast<std::size_t>(f - 1)] = fn(f);
      } catch (...) {
        errors[static_cast<std::size_t>(f - 1)] = std::current_exception();
      }
    }
  };
  const int n = std::clamp(threads, 1, folds);
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline EvalReport assemble(const std::vector<FoldOutcome>& outcomes, const RunSpec& spec, nlohmann::json meta) {
  EvalReport r;
  r.meta = std::move(meta);
  if (spec.ekf) {
    ModelReport m{"ekf", "baseline", {}, {}, nullptr};
    for (const auto& o : outcomes) m.folds.push_back(*o.ekf);
    m.pooled = pool_blocks(m.folds);
    r.models.push_back(std::move(m));
  }
  for (std::size_t a = 0; a < spec.architectures.size(); ++a) {
    for (std::size_t v = 0; v < spec.variants.size(); ++v) {
      ModelReport m{to_string(spec.architectures[a]), to_string(spec.variants[v]), {}, {}, nlohmann::json::array()};
      for (const auto& o : outcomes) {
        m.folds.push_back(o.blocks[a][v]);
        const auto& t = o.training[a];
        const char* key = spec.variants[v] == Variant::kNoIntent ? "traj_no_intent" : "traj";
        nlohmann::json fold_log = {{"traj", t.contains(key) ? t.at(key) : nlohmann::json(nullptr)}};
        if (spec.variants[v] == Variant::kMultimodal) fold_log["intent"] = t.contains("intent") ? t.at("intent") : nlohmann::json(nullptr);
        m.training.push_back(std::move(fold_log));
      }
      m.pooled = pool_blocks(m.folds);
      r.models.push_back(std::move(m));
    }
  }
  return r;
}

inline nlohmann::json report_meta(const Dataset& ds, const TrainConfig& cfg, const RunSpec& spec) {
  nlohmann::json config = {{"train", cfg}, {"dataset", ds.cfg}, {"run", run_spec_json(spec)}};
  config["train"].erase("threads");
  return {{"seed", cfg.seed},
          {"config", config},
          {"config_hash", hex64(fnv1a(config.dump()))},
          {"snippets", ds.size()},
          {"spots", ds.lot.spot_count()},
          {"curved_heading_change", kCurvedHeadingChange}};
}

}  // namespace detail

/// K-fold cross-validation of every requested row. Folds are grouped by demonstration.
inline EvalReport cross_validate(const Dataset& ds, const TrainConfig& cfg, const RunSpec& spec, const Logger& log = {}) {
  cfg.validate();
  detail::require_images(ds, spec);
  if (spec.rollouts < 1 || spec.rollouts > ds.lot.spot_count() + 1) throw DataError("rollout count must be in 1..G+1");
  if (ds.snippets.empty()) throw DataError("cross_validate: dataset has no snippets");
  const auto split = kfold_split(snippet_demo_ids(ds), cfg.folds, cfg.seed);
  if (spec.checkpoint_dir) {
    std::filesystem::create_directories(*spec.checkpoint_dir);
    std::ofstream(*spec.checkpoint_dir / "folds.json") << folds_json(split, cfg.seed).dump(2) << '\n';
  }
  std::mutex log_mutex;
  Logger safe_log;
  if (log)
    safe_log = [&](const std::string& s) {
      std::lock_guard lock(log_mutex);
      log(s);
    };
  const auto outcomes =
      detail::for_each_fold(cfg.folds, cfg.threads, [&](int f) { return detail::train_fold(ds, split, f, cfg, spec, safe_log); });
  return detail::assemble(outcomes, spec, detail::report_meta(ds, cfg, spec));
}

/// Re-evaluates saved checkpoints from `cross_validate` without training.
inline EvalReport evaluate_checkpoints(const Dataset& ds, const std::filesystem::path& dir, const TrainConfig& cfg,
                                       const RunSpec& spec) {
  detail::require_images(ds, spec);
  std::ifstream in(dir / "folds.json");
  if (!in) throw DataError("missing " + (dir / "folds.json").string());
  const auto split = folds_from_json(nlohmann::json::parse(in), ds);
  const auto outcomes = detail::for_each_fold(split.folds, cfg.threads, [&](int f) { return detail::load_fold(ds, split, f, spec, dir); });
  TrainConfig effective = cfg;
  effective.folds = split.folds;
  return detail::assemble(outcomes, spec, detail::report_meta(ds, effective, spec));
}

/// The full comparison set: EKF plus every architecture the dataset supports x all variants.
inline EvalReport run_variants(const Dataset& ds, const TrainConfig& cfg, std::optional<std::filesystem::path> checkpoint_dir = {},
                               const Logger& log = {}) {
  RunSpec spec;
  spec.architectures = {Architecture::kLstm, Architecture::kCnn};
  spec.checkpoint_dir = std::move(checkpoint_dir);
  return cross_validate(ds, cfg, spec, log);
}

}  // namespace parkpredict

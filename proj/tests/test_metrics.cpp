#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "parkpredict/metrics.hpp"

using namespace parkpredict;

namespace {

// Enumeration oracle: sort every category by (probability desc, index asc) and look up the label.
bool oracle_in_top_n(const std::vector<double>& p, int label, int n) {
  std::vector<std::pair<double, int>> order;
  for (int j = 0; j < static_cast<int>(p.size()); ++j) order.emplace_back(-p[static_cast<std::size_t>(j)], j);
  std::sort(order.begin(), order.end());
  for (int k = 0; k < n; ++k)
    if (order[static_cast<std::size_t>(k)].second == label) return true;
  return false;
}

std::vector<Pose> random_traj(std::mt19937_64& rng, int n, double scale = 5.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<Pose> t;
  for (int k = 0; k < n; ++k) t.push_back({d(rng), d(rng), d(rng)});
  return t;
}

}  // namespace

TEST(IntentRank, TiesGoToLowerIndex) {
  EXPECT_EQ(intent_rank({0.2, 0.5, 0.3}, 1), 1);
  EXPECT_EQ(intent_rank({0.2, 0.5, 0.3}, 0), 3);
  EXPECT_EQ(intent_rank({0.25, 0.25, 0.25, 0.25}, 0), 1);
  EXPECT_EQ(intent_rank({0.25, 0.25, 0.25, 0.25}, 3), 4);
}

TEST(TopNAccuracy, PerfectPredictor) {
  std::vector<std::vector<double>> p;
  std::vector<int> labels;
  for (int i = 0; i < 65; ++i) {
    std::vector<double> onehot(65, 0.0);
    onehot[static_cast<std::size_t>(i)] = 1.0;
    p.push_back(onehot);
    labels.push_back(i);
  }
  EXPECT_DOUBLE_EQ(top_n_accuracy(p, labels, 1), 1.0);
}

TEST(TopNAccuracy, UniformPredictionsFollowIndexOrder) {
  const std::vector<double> uniform(10, 0.1);
  std::vector<std::vector<double>> p(10, uniform);
  std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  for (int n = 1; n <= 10; ++n) EXPECT_DOUBLE_EQ(top_n_accuracy(p, labels, n), n / 10.0);
  labels = {0, 0, 0, 9, 9, 9, 9, 9, 1, 2};
  EXPECT_DOUBLE_EQ(top_n_accuracy(p, labels, 1), 0.3);
  EXPECT_DOUBLE_EQ(top_n_accuracy(p, labels, 3), 0.5);
}

TEST(TopNAccuracy, MatchesEnumerationOracleOnRandomInstances) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> coarse(0, 4);  // coarse values force many ties
  std::uniform_int_distribution<int> label(0, 64);
  for (int trial = 0; trial < 1000; ++trial) {
    const int count = 1 + trial % 17;
    std::vector<std::vector<double>> p;
    std::vector<int> labels;
    for (int i = 0; i < count; ++i) {
      std::vector<double> v(65);
      double s = 0.0;
      for (auto& x : v) s += (x = coarse(rng));
      if (s == 0.0) v[0] = s = 1.0;
      for (auto& x : v) x /= s;
      p.push_back(v);
      labels.push_back(label(rng));
    }
    double prev = 0.0;
    for (int n = 1; n <= 65; n += (n < 5 ? 1 : 15)) {
      std::size_t hits = 0;
      for (int i = 0; i < count; ++i) hits += oracle_in_top_n(p[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(i)], n);
      const double a = top_n_accuracy(p, labels, n);
      EXPECT_EQ(a, static_cast<double>(hits) / count);
      EXPECT_GE(a, prev);
      prev = a;
    }
    EXPECT_EQ(top_n_accuracy(p, labels, 65), 1.0);
  }
}

TEST(TopNAccuracy, Errors) {
  const std::vector<std::vector<double>> p{{0.5, 0.5}};
  EXPECT_THROW(top_n_accuracy(p, {0}, 0), DataError);
  EXPECT_THROW(top_n_accuracy(p, {0}, 3), DataError);
  EXPECT_THROW(top_n_accuracy(p, {0, 1}, 1), ShapeError);
  EXPECT_THROW(top_n_accuracy({}, {}, 1), DataError);
  EXPECT_THROW(top_n_accuracy(p, {2}, 1), ShapeError);
  EXPECT_THROW(top_n_accuracy({{0.5, 0.5}, {1.0}}, {0, 0}, 1), ShapeError);
}

TEST(MeanDistanceError, ClosedForms) {
  std::mt19937_64 rng(2);
  std::vector<std::vector<Pose>> truth, shifted;
  for (int i = 0; i < 30; ++i) {
    truth.push_back(random_traj(rng, 20));
    shifted.push_back(truth.back());
    for (auto& p : shifted.back()) {
      p.y += 1.0;
      p.theta += 2.0;
    }
  }
  for (double d : mean_distance_error(truth, truth)) EXPECT_EQ(d, 0.0);
  const auto d = mean_distance_error(shifted, truth);
  ASSERT_EQ(d.size(), 20u);
  for (double v : d) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(MeanDistanceError, MatchesIndependentSummation) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const int count = 1 + trial % 9, horizon = 1 + trial % 20;
    std::vector<std::vector<Pose>> pred, truth;
    for (int i = 0; i < count; ++i) {
      pred.push_back(random_traj(rng, horizon));
      truth.push_back(random_traj(rng, horizon));
    }
    const auto d = mean_distance_error(pred, truth);
    for (int k = 0; k < horizon; ++k) {
      double s = 0.0;
      for (int i = 0; i < count; ++i) {
        const auto& a = pred[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        const auto& b = truth[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        s += std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y));
      }
      EXPECT_NEAR(d[static_cast<std::size_t>(k)], s / count, 1e-12);
    }
  }
}

TEST(MeanDistanceError, Errors) {
  std::vector<std::vector<Pose>> a{std::vector<Pose>(20)}, b{std::vector<Pose>(19)};
  EXPECT_THROW(mean_distance_error(a, b), ShapeError);
  EXPECT_THROW(mean_distance_error(a, {}), ShapeError);
  EXPECT_THROW(mean_distance_error({}, {}), DataError);
}

TEST(BestOfN, SingletonAndExactMatch) {
  std::mt19937_64 rng(4);
  const auto truth = random_traj(rng, 20);
  EXPECT_EQ(best_of_n_selection({{3, 0.2, random_traj(rng, 20)}}, truth), 0u);
  std::vector<Rollout> r{{0, 0.6, random_traj(rng, 20)}, {1, 0.3, truth}, {2, 0.1, random_traj(rng, 20)}};
  EXPECT_EQ(best_of_n_selection(r, truth), 1u);
  EXPECT_THROW(best_of_n_selection({}, truth), DataError);
}

TEST(BestOfN, TiesPreferProbabilityThenOrder) {
  std::vector<Pose> truth(20, Pose{0.0, 0.0, 0.0});
  std::vector<Pose> off(20, Pose{1.0, 0.0, 0.0}), off_y(20, Pose{0.0, -1.0, 0.0});
  EXPECT_EQ(best_of_n_selection({{0, 0.2, off}, {1, 0.5, off_y}, {2, 0.3, off}}, truth), 1u);
  EXPECT_EQ(best_of_n_selection({{0, 0.4, off}, {1, 0.4, off_y}}, truth), 0u);
}

TEST(BestOfN, MatchesExhaustiveComparison) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto truth = random_traj(rng, 20);
    std::vector<Rollout> r;
    for (int k = 0; k < 3; ++k) r.push_back({k, 0.5 - 0.1 * k, random_traj(rng, 20)});
    std::size_t best = 0;
    double best_loss = 1e300;
    for (std::size_t k = 0; k < 3; ++k) {
      double s = 0.0;
      for (std::size_t t = 0; t < 20; ++t) s += std::hypot(r[k].trajectory[t].x - truth[t].x, r[k].trajectory[t].y - truth[t].y);
      if (s / 20.0 < best_loss) {
        best_loss = s / 20.0;
        best = k;
      }
    }
    EXPECT_EQ(best_of_n_selection(r, truth), best);
  }
}

TEST(BestOfN, NeverWorseThanTopOneOnAverage) {
  // The selected rollout minimizes the horizon mean, so its d averaged over k can't exceed top-1's.
  std::mt19937_64 rng(6);
  std::vector<std::vector<Pose>> best, top1, truth;
  for (int i = 0; i < 200; ++i) {
    truth.push_back(random_traj(rng, 20));
    std::vector<Rollout> r;
    for (int k = 0; k < 3; ++k) r.push_back({k, 0.5 - 0.1 * k, random_traj(rng, 20)});
    best.push_back(r[best_of_n_selection(r, truth.back())].trajectory);
    top1.push_back(r.front().trajectory);
    EXPECT_LE(traj_loss(best.back(), truth.back()), traj_loss(top1.back(), truth.back()));
  }
  const auto db = mean_distance_error(best, truth), dt = mean_distance_error(top1, truth);
  double sb = 0.0, st = 0.0;
  for (std::size_t k = 0; k < 20; ++k) {
    sb += db[k];
    st += dt[k];
  }
  EXPECT_LE(sb, st);
}

#pragma once

#include <cmath>
#include <vector>

#include "parkpredict/errors.hpp"
#include "parkpredict/geometry.hpp"
#include "parkpredict/models.hpp"

namespace parkpredict {

/// 1-based rank of `label` in `p` under descending probability, ties to the lower index.
inline int intent_rank(const std::vector<double>& p, int label) {
  const double pl = p[static_cast<std::size_t>(label)];
  int ahead = 0;
  for (int j = 0; j < static_cast<int>(p.size()); ++j) {
    const double pj = p[static_cast<std::size_t>(j)];
    if (pj > pl || (pj == pl && j < label)) ++ahead;
  }
  return ahead + 1;
}

/// Fraction of instances whose true category is among the n most probable predictions.
inline double top_n_accuracy(const std::vector<std::vector<double>>& predicted, const std::vector<int>& labels, int n) {
  if (predicted.size() != labels.size()) throw ShapeError("top_n_accuracy: list lengths differ");
  if (predicted.empty()) throw DataError("top_n_accuracy: no instances");
  const int categories = static_cast<int>(predicted.front().size());
  if (n < 1 || n > categories) throw DataError("top_n_accuracy: n must be in 1..G+1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (static_cast<int>(predicted[i].size()) != categories) throw ShapeError("top_n_accuracy: ragged predictions");
    if (labels[i] < 0 || labels[i] >= categories) throw ShapeError("top_n_accuracy: label out of range");
    if (intent_rank(predicted[i], labels[i]) <= n) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// d_k for k = 1..N_pred: mean Euclidean position error at each step.
inline std::vector<double> mean_distance_error(const std::vector<std::vector<Pose>>& predicted,
                                               const std::vector<std::vector<Pose>>& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("mean_distance_error: list lengths differ");
  if (predicted.empty()) throw DataError("mean_distance_error: no instances");
  const std::size_t horizon = truth.front().size();
  std::vector<double> d(horizon, 0.0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i].size() != horizon || truth[i].size() != horizon) throw ShapeError("mean_distance_error: horizon mismatch");
    for (std::size_t k = 0; k < horizon; ++k)
      d[k] += std::hypot(predicted[i][k].x - truth[i][k].x, predicted[i][k].y - truth[i][k].y);
  }
  for (auto& v : d) v /= static_cast<double>(truth.size());
  return d;
}

/// Index of the rollout with the smallest J^traj against the truth; ties go to the higher probability,
/// then to the earlier rollout.
inline std::size_t best_of_n_selection(const std::vector<Rollout>& rollouts, const std::vector<Pose>& truth) {
  if (rollouts.empty()) throw DataError("best_of_n_selection: no rollouts");
  std::size_t best = 0;
  double best_loss = traj_loss(rollouts[0].trajectory, truth);
  for (std::size_t r = 1; r < rollouts.size(); ++r) {
    const double l = traj_loss(rollouts[r].trajectory, truth);
    if (l < best_loss || (l == best_loss && rollouts[r].probability > rollouts[best].probability)) {
      best = r;
      best_loss = l;
    }
  }
  return best;
}

}  // namespace parkpredict

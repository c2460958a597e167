#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "parkpredict/demo_gen.hpp"
#include "parkpredict/errors.hpp"
#include "parkpredict/geometry.hpp"
#include "parkpredict/lot.hpp"

namespace parkpredict::ekf {

// State layout: x, y, theta, v, omega.
using StateVector = Eigen::Matrix<double, 5, 1>;
using StateMatrix = Eigen::Matrix<double, 5, 5>;
using MeasurementVector = Eigen::Vector3d;
using MeasurementMatrix = Eigen::Matrix3d;

struct EkfState {
  StateVector mean = StateVector::Zero();
  StateMatrix covariance = StateMatrix::Identity();
};

struct NoiseConfig {
  StateMatrix Q = (StateVector() << 1e-4, 1e-4, 1e-4, 1e-2, 1e-2).finished().asDiagonal();
  MeasurementMatrix R = MeasurementMatrix::Identity() * 1e-3;
};

inline void to_json(nlohmann::json& j, const NoiseConfig& n) {
  std::vector<double> q(25), r(9);
  for (int i = 0; i < 5; ++i)
    for (int k = 0; k < 5; ++k) q[static_cast<std::size_t>(i * 5 + k)] = n.Q(i, k);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r[static_cast<std::size_t>(i * 3 + k)] = n.R(i, k);
  j = {{"Q", q}, {"R", r}};
}

inline void from_json(const nlohmann::json& j, NoiseConfig& n) {
  const auto q = j.at("Q").get<std::vector<double>>();
  const auto r = j.at("R").get<std::vector<double>>();
  if (q.size() != 25 || r.size() != 9) throw ShapeError("NoiseConfig: Q must have 25 and R 9 row-major entries");
  for (int i = 0; i < 5; ++i)
    for (int k = 0; k < 5; ++k) n.Q(i, k) = q[static_cast<std::size_t>(i * 5 + k)];
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) n.R(i, k) = r[static_cast<std::size_t>(i * 3 + k)];
}

/// Euler-discretised constant-velocity unicycle.
inline StateVector dynamics(const StateVector& s, double dt) {
  StateVector out = s;
  out(0) += s(3) * std::cos(s(2)) * dt;
  out(1) += s(3) * std::sin(s(2)) * dt;
  out(2) += s(4) * dt;
  return out;
}

inline StateMatrix dynamics_jacobian(const StateVector& s, double dt) {
  StateMatrix f = StateMatrix::Identity();
  const double c = std::cos(s(2));
  const double sn = std::sin(s(2));
  f(0, 2) = -s(3) * sn * dt;
  f(0, 3) = c * dt;
  f(1, 2) = s(3) * c * dt;
  f(1, 3) = sn * dt;
  f(2, 4) = dt;
  return f;
}

inline EkfState time_update(const EkfState& s, double dt, const StateMatrix& Q) {
  if (!(dt > 0.0)) throw std::invalid_argument("time_update: dt must be positive");
  const StateMatrix f = dynamics_jacobian(s.mean, dt);
  EkfState out;
  out.mean = dynamics(s.mean, dt);
  out.covariance = f * s.covariance * f.transpose() + Q;
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
  return out;
}

/// Kalman update with H = [I3 0]; the heading innovation is wrapped to (-pi, pi].
inline EkfState measurement_update(const EkfState& s, const Pose& z, const MeasurementMatrix& R) {
  const MeasurementVector innovation(z.x - s.mean(0), z.y - s.mean(1), wrap_angle(z.theta - s.mean(2)));
  const Eigen::Matrix<double, 5, 3> ph = s.covariance.leftCols<3>();
  const MeasurementMatrix innovation_cov = s.covariance.topLeftCorner<3, 3>() + R;
  const Eigen::LDLT<MeasurementMatrix> ldlt(innovation_cov);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() <= 1e-15 * std::max(1.0, innovation_cov.cwiseAbs().maxCoeff()))
    throw std::runtime_error("measurement_update: singular innovation covariance");
  const Eigen::Matrix<double, 5, 3> gain = ldlt.solve(ph.transpose()).transpose();

  EkfState out;
  out.mean = s.mean + gain * innovation;
  // Joseph form keeps the posterior symmetric PSD.
  Eigen::Matrix<double, 5, 5> ikh = StateMatrix::Identity();
  ikh.leftCols<3>() -= gain;
  out.covariance = ikh * s.covariance * ikh.transpose() + gain * R * gain.transpose();
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
  return out;
}

/// Fits Q from one-step residuals of the Euler model. Speeds and yaw rates come from backward
/// differences, so each pose k >= 1 carries a full state and residuals run over k = 1 .. T-2.
inline StateMatrix estimate_Q(const std::vector<std::vector<Pose>>& sequences, double dt) {
  if (!(dt > 0.0)) throw DataError("estimate_Q: dt must be positive");
  std::vector<StateVector> residuals;
  for (const auto& poses : sequences) {
    if (poses.size() < 3) continue;
    auto state_at = [&](std::size_t k) {
      const Pose& a = poses[k - 1];
      const Pose& b = poses[k];
      StateVector s;
      s << b.x, b.y, b.theta,
          ((b.x - a.x) * std::cos(a.theta) + (b.y - a.y) * std::sin(a.theta)) / dt,
          wrap_angle(b.theta - a.theta) / dt;
      return s;
    };
    for (std::size_t k = 1; k + 1 < poses.size(); ++k) {
      const StateVector predicted = dynamics(state_at(k), dt);
      StateVector r = state_at(k + 1) - predicted;
      r(2) = wrap_angle(r(2));
      residuals.push_back(r);
    }
  }
  if (residuals.empty()) throw DataError("estimate_Q: need at least one sequence with three poses");

  StateVector mean = StateVector::Zero();
  for (const auto& r : residuals) mean += r;
  mean /= static_cast<double>(residuals.size());
  StateMatrix q = StateMatrix::Zero();
  for (const auto& r : residuals) q += (r - mean) * (r - mean).transpose();
  q /= static_cast<double>(std::max<std::size_t>(residuals.size() - 1, 1));
  q = 0.5 * (q + q.transpose());
  for (int i = 0; i < 5; ++i) q(i, i) = std::max(q(i, i), 1e-9);
  return q;
}

inline StateMatrix estimate_Q(const std::vector<Demonstration>& demos) {
  if (demos.empty()) throw DataError("estimate_Q: no demonstrations");
  std::vector<std::vector<Pose>> seqs;
  for (const auto& d : demos) {
    if (std::abs(d.dt - demos.front().dt) > 1e-12) throw DataError("estimate_Q: demonstrations use different dt");
    std::vector<Pose> p;
    for (const auto& tp : d.poses) p.push_back(tp.pose);
    seqs.push_back(std::move(p));
  }
  return estimate_Q(seqs, demos.front().dt);
}

/// Initial covariance used by ekf_predict.
inline StateMatrix initial_covariance() {
  return (StateVector() << 1.0, 1.0, 0.1, 1.0, 0.1).finished().asDiagonal();
}

/// Filters a timestamped pose history and extrapolates `n_pred` steps of `dt_pred` with pure time updates.
inline std::vector<Pose> ekf_predict(std::span<const double> times, std::span<const Pose> history,
                                     const NoiseConfig& noise, int n_pred, double dt_pred) {
  if (history.size() < 2 || times.size() != history.size())
    throw DataError("ekf_predict: need at least two timestamped poses");
  for (std::size_t k = 1; k < times.size(); ++k)
    if (!(times[k] > times[k - 1])) throw DataError("ekf_predict: timestamps must be strictly increasing");
  if (!(dt_pred > 0.0) || n_pred < 0) throw DataError("ekf_predict: invalid prediction horizon");

  const Pose& p0 = history[0];
  const Pose& p1 = history[1];
  const double dt0 = times[1] - times[0];
  EkfState s;
  s.mean << p0.x, p0.y, p0.theta,
      ((p1.x - p0.x) * std::cos(p0.theta) + (p1.y - p0.y) * std::sin(p0.theta)) / dt0,
      wrap_angle(p1.theta - p0.theta) / dt0;
  s.covariance = initial_covariance();
  for (std::size_t k = 1; k < history.size(); ++k) {
    s = time_update(s, times[k] - times[k - 1], noise.Q);
    s = measurement_update(s, history[k], noise.R);
  }
  std::vector<Pose> out;
  out.reserve(static_cast<std::size_t>(n_pred));
  for (int k = 0; k < n_pred; ++k) {
    s = time_update(s, dt_pred, noise.Q);
    out.push_back({s.mean(0), s.mean(1), wrap_angle(s.mean(2))});
  }
  return out;
}

/// Uniformly sampled history variant.
inline std::vector<Pose> ekf_predict(std::span<const Pose> history, double dt, const NoiseConfig& noise, int n_pred) {
  std::vector<double> times(history.size());
  for (std::size_t k = 0; k < times.size(); ++k) times[k] = static_cast<double>(k) * dt;
  return ekf_predict(times, history, noise, n_pred, dt);
}

/// Inverse-distance intent over free spots; spots beyond `threshold` hand their share to the
/// undetermined category (last entry). Occupied spots get exactly zero.
inline std::vector<double> ekf_intent(const Pose& endpoint, const OccupancyMatrix& occ, double threshold = 20.0,
                                      double eps = 1e-6) {
  const std::size_t g = occ.size();
  std::vector<double> p(g + 1, 0.0);
  std::vector<double> dist(g, 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < g; ++j) {
    if (!occ.entries[j].free) continue;
    dist[j] = std::hypot(occ.entries[j].x - endpoint.x, occ.entries[j].y - endpoint.y);
    p[j] = 1.0 / std::max(dist[j], eps);
    total += p[j];
  }
  if (total == 0.0) {
    p[g] = 1.0;
    return p;
  }
  for (std::size_t j = 0; j < g; ++j) {
    if (p[j] == 0.0) continue;
    p[j] /= total;
    if (dist[j] > threshold) {
      p[g] += p[j];
      p[j] = 0.0;
    }
  }
  return p;
}

}  // namespace parkpredict::ekf

#pragma once

// Few-step samplers: Euler for rectified flow, the constant-acceleration
// midpoint rule for CAF, CAF inversion and inversion/regeneration round trips.

#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "caf/error.hpp"
#include "caf/fields.hpp"
#include "caf/flowcore.hpp"

namespace caf {

enum class Direction { forward, inverse };

/// One simulated path. Times are strictly increasing for forward runs and
/// strictly decreasing for inverse runs; both endpoints are always present.
struct TrajectoryLog {
  std::vector<double> times;
  std::vector<Vec> points;
  Direction direction = Direction::forward;
  int n_steps = 0;
  double h = 1.0;
  std::string model_ids;
};

struct SamplerOptions {
  /// Number of leading batch columns whose paths are logged.
  std::size_t log_columns = 0;
  /// Throw NumericError on the first non-finite state; otherwise keep going
  /// and let the caller filter columns.
  bool abort_on_nonfinite = true;
  /// Called at every grid time, including both endpoints.
  std::function<void(int step, double t, const Mat& x)> observer;
  double h = 1.0;  // recorded in log metadata only
  std::string model_ids;
};

struct SampleResult {
  Mat endpoints;
  std::vector<TrajectoryLog> logs;
};

struct InversionResult {
  Mat sources;          // x0_hat
  Mat initial_velocity; // v_used, reused by the regeneration pass
  std::vector<TrajectoryLog> logs;
};

struct ReconstructionResult {
  Mat endpoints;                // x1_hat
  Eigen::VectorXd errors;       // per-column ||x1_hat - x1||
  double mean_error = 0.0;
};

namespace detail {

class PathRecorder {
 public:
  PathRecorder(const SamplerOptions& opt, Eigen::Index cols, Direction dir, int n_steps) : opt_(opt) {
    const auto n = std::min<std::size_t>(opt.log_columns, static_cast<std::size_t>(cols));
    logs_.resize(n);
    for (auto& log : logs_) {
      log.direction = dir;
      log.n_steps = n_steps;
      log.h = opt.h;
      log.model_ids = opt.model_ids;
    }
  }

  void record(int step, double t, const Mat& x) {
    if (opt_.abort_on_nonfinite && !x.allFinite())
      throw NumericError("sampler: non-finite state at step " + std::to_string(step));
    for (std::size_t j = 0; j < logs_.size(); ++j) {
      logs_[j].times.push_back(t);
      logs_[j].points.emplace_back(x.col(static_cast<Eigen::Index>(j)));
    }
    if (opt_.observer) opt_.observer(step, t, x);
  }

  std::vector<TrajectoryLog> take() { return std::move(logs_); }

 private:
  const SamplerOptions& opt_;
  std::vector<TrajectoryLog> logs_;
};

inline void require_steps(int n) {
  if (n < 1) throw ConfigError("sampler: N must be >= 1");
}

}  // namespace detail

/// Euler: x_{t+dt} = x_t + dt v(x_t, t) on the grid t = i/N.
template <VelocityField V>
SampleResult sample_rf(const Mat& x0, const V& velocity, int n_steps, const SamplerOptions& opt = {}) {
  detail::require_steps(n_steps);
  const FlowConfig grid{1.0, n_steps};
  detail::PathRecorder rec(opt, x0.cols(), Direction::forward, n_steps);
  Mat x = x0;
  rec.record(0, 0.0, x);
  for (int i = 0; i < n_steps; ++i) {
    x += grid.dt() * velocity(x, grid.time(i));
    rec.record(i + 1, grid.time(i + 1), x);
  }
  return {std::move(x), rec.take()};
}

/// Constant-acceleration update from a known initial velocity:
/// x_{t+dt} = x_t + dt v + t'_i dt a(x_t, t, v), t'_i = (2i+1)/(2N).
template <AccelerationField A>
SampleResult sample_caf_from_velocity(const Mat& x0, const Mat& v0, const A& accel, int n_steps,
                                      const SamplerOptions& opt = {}) {
  detail::require_steps(n_steps);
  if (v0.rows() != x0.rows() || v0.cols() != x0.cols()) throw ShapeError("sample_caf: v0 shape differs from x0");
  const FlowConfig grid{1.0, n_steps};
  detail::PathRecorder rec(opt, x0.cols(), Direction::forward, n_steps);
  Mat x = x0;
  rec.record(0, 0.0, x);
  for (int i = 0; i < n_steps; ++i) {
    const Mat a = accel(x, grid.time(i), v0);
    x += grid.dt() * v0 + (grid.midpoint(i) * grid.dt()) * a;
    rec.record(i + 1, grid.time(i + 1), x);
  }
  return {std::move(x), rec.take()};
}

/// CAF sampler. The velocity field is evaluated once at (x0, t=0); the
/// acceleration field N times, for N+1 evaluations per sample.
template <VelocityField V, AccelerationField A>
SampleResult sample_caf(const Mat& x0, const V& velocity, const A& accel, int n_steps,
                        const SamplerOptions& opt = {}) {
  detail::require_steps(n_steps);
  const Mat v0 = velocity(x0, 0.0);
  return sample_caf_from_velocity(x0, v0, accel, n_steps, opt);
}

/// Runs the CAF update backwards from x1, with v estimated once at (x1, t=1)
/// and the same midpoints in descending order.
template <VelocityField V, AccelerationField A>
InversionResult invert_caf(const Mat& x1, const V& velocity, const A& accel, int n_steps,
                           const SamplerOptions& opt = {}) {
  detail::require_steps(n_steps);
  const FlowConfig grid{1.0, n_steps};
  detail::PathRecorder rec(opt, x1.cols(), Direction::inverse, n_steps);
  Mat v = velocity(x1, 1.0);
  Mat x = x1;
  rec.record(n_steps, 1.0, x);
  for (int i = n_steps - 1; i >= 0; --i) {
    const Mat a = accel(x, grid.time(i + 1), v);
    x -= grid.dt() * v + (grid.midpoint(i) * grid.dt()) * a;
    rec.record(i, grid.time(i), x);
  }
  return {std::move(x), std::move(v), rec.take()};
}

/// Inverts x1, then regenerates from x0_hat reusing the inversion's velocity.
template <VelocityField V, AccelerationField A>
ReconstructionResult reconstruct(const Mat& x1, const V& velocity, const A& accel, int n_steps) {
  const auto inv = invert_caf(x1, velocity, accel, n_steps);
  auto fwd = sample_caf_from_velocity(inv.sources, inv.initial_velocity, accel, n_steps);
  ReconstructionResult r;
  r.errors = (fwd.endpoints - x1).colwise().norm().transpose();
  r.mean_error = r.errors.size() ? r.errors.mean() : 0.0;
  r.endpoints = std::move(fwd.endpoints);
  return r;
}

/// Backward Euler-style inversion for rectified flow:
/// x_t = x_{t+dt} - dt v(x_{t+dt}, t+dt).
template <VelocityField V>
SampleResult invert_rf(const Mat& x1, const V& velocity, int n_steps, const SamplerOptions& opt = {}) {
  detail::require_steps(n_steps);
  const FlowConfig grid{1.0, n_steps};
  detail::PathRecorder rec(opt, x1.cols(), Direction::inverse, n_steps);
  Mat x = x1;
  rec.record(n_steps, 1.0, x);
  for (int i = n_steps - 1; i >= 0; --i) {
    x -= grid.dt() * velocity(x, grid.time(i + 1));
    rec.record(i, grid.time(i), x);
  }
  return {std::move(x), rec.take()};
}

template <VelocityField V>
ReconstructionResult reconstruct_rf(const Mat& x1, const V& velocity, int n_steps) {
  const auto inv = invert_rf(x1, velocity, n_steps);
  auto fwd = sample_rf(inv.endpoints, velocity, n_steps);
  ReconstructionResult r;
  r.errors = (fwd.endpoints - x1).colwise().norm().transpose();
  r.mean_error = r.errors.size() ? r.errors.mean() : 0.0;
  r.endpoints = std::move(fwd.endpoints);
  return r;
}

// Single-point conveniences.

template <VelocityField V>
std::pair<Vec, TrajectoryLog> sample_rf_point(const Vec& x0, const V& velocity, int n_steps) {
  SamplerOptions opt;
  opt.log_columns = 1;
  auto r = sample_rf(Mat(x0), velocity, n_steps, opt);
  return {r.endpoints.col(0), std::move(r.logs.front())};
}

template <VelocityField V, AccelerationField A>
std::pair<Vec, TrajectoryLog> sample_caf_point(const Vec& x0, const V& velocity, const A& accel, int n_steps) {
  SamplerOptions opt;
  opt.log_columns = 1;
  auto r = sample_caf(Mat(x0), velocity, accel, n_steps, opt);
  return {r.endpoints.col(0), std::move(r.logs.front())};
}

/// CSV with columns path, t, x_0..x_{d-1}.
inline void export_trajectories_csv(const std::vector<TrajectoryLog>& logs, std::ostream& os) {
  const auto d = logs.empty() || logs.front().points.empty() ? 0 : logs.front().points.front().size();
  os << "path,t";
  for (Eigen::Index i = 0; i < d; ++i) os << ",x_" << i;
  os << "\n" << std::setprecision(17);
  for (std::size_t p = 0; p < logs.size(); ++p)
    for (std::size_t k = 0; k < logs[p].times.size(); ++k) {
      os << p << "," << logs[p].times[k];
      for (Eigen::Index i = 0; i < d; ++i) os << "," << logs[p].points[k](i);
      os << "\n";
    }
}

}  // namespace caf

#pragma once

// Interpolants and ground-truth target fields for rectified flow and
// constant-acceleration flow.
//
// Every function accepts either a single point (Vec) or a batch of points
// stored as matrix columns; arithmetic is element-wise over columns.

#include <cmath>
#include <string>

#include "caf/error.hpp"
#include "caf/nnsub.hpp"

namespace caf {

enum class TimeDistribution { uniform };
enum class DistanceMetric { l2_squared };

struct FlowConfig {
  /// Initial-velocity scale: v = h (x1 - x0). h=1 is constant velocity,
  /// h>1 decelerates, h<1 accelerates.
  double h = 2.0;
  /// Sampler steps N; the step size is always formed as i/N.
  int n_steps = 1;
  TimeDistribution time_dist = TimeDistribution::uniform;
  DistanceMetric distance = DistanceMetric::l2_squared;

  void validate() const {
    if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
    if (!std::isfinite(h)) throw ConfigError("h must be finite");
  }

  double dt() const { return 1.0 / n_steps; }
  /// Grid time i/N.
  double time(int i) const { return static_cast<double>(i) / n_steps; }
  /// Step midpoint (2i+1)/(2N) used to weight the acceleration term.
  double midpoint(int i) const { return static_cast<double>(2 * i + 1) / (2.0 * n_steps); }
};

namespace detail {

template <typename A, typename B>
void require_same_shape(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": operand shapes differ");
}

inline void require_unit_time(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError(std::string(what) + ": t must lie in [0, 1]");
}

}  // namespace detail

/// (1-t) x0 + t x1.
template <typename A, typename B>
typename A::PlainObject interp_rf(const Eigen::MatrixBase<A>& x0, const Eigen::MatrixBase<B>& x1, double t) {
  detail::require_same_shape(x0, x1, "interp_rf");
  detail::require_unit_time(t, "interp_rf");
  return (1.0 - t) * x0 + t * x1;
}

/// h (x1 - x0).
template <typename A, typename B>
typename A::PlainObject velocity_target(const Eigen::MatrixBase<A>& x0, const Eigen::MatrixBase<B>& x1,
                                        double h) {
  detail::require_same_shape(x0, x1, "velocity_target");
  return h * (x1 - x0);
}

/// 2 (x1 - x0) - 2 v: the constant acceleration that carries x0 to x1 at t=1
/// when starting with velocity v.
template <typename A, typename B, typename C>
typename A::PlainObject acceleration_target(const Eigen::MatrixBase<A>& x0, const Eigen::MatrixBase<B>& x1,
                                            const Eigen::MatrixBase<C>& v) {
  detail::require_same_shape(x0, x1, "acceleration_target");
  detail::require_same_shape(x0, v, "acceleration_target");
  return 2.0 * (x1 - x0) - 2.0 * v;
}

/// (1 - t^2) x0 + t^2 x1 + v (t - t^2).
template <typename A, typename B, typename C>
typename A::PlainObject interp_caf(const Eigen::MatrixBase<A>& x0, const Eigen::MatrixBase<B>& x1, double t,
                                   const Eigen::MatrixBase<C>& v) {
  detail::require_same_shape(x0, x1, "interp_caf");
  detail::require_same_shape(x0, v, "interp_caf");
  detail::require_unit_time(t, "interp_caf");
  const double t2 = t * t;
  return (1.0 - t2) * x0 + t2 * x1 + (t - t2) * v;
}

/// x0 + v + a/2: the endpoint of a constant-acceleration trajectory at t=1.
template <typename A, typename B, typename C>
typename A::PlainObject closed_form_endpoint(const Eigen::MatrixBase<A>& x0, const Eigen::MatrixBase<B>& v,
                                             const Eigen::MatrixBase<C>& a) {
  detail::require_same_shape(x0, v, "closed_form_endpoint");
  detail::require_same_shape(x0, a, "closed_form_endpoint");
  return x0 + v + 0.5 * a;
}

template <typename M>
struct ExactFields {
  M v;    // initial velocity h (x1 - x0)
  M a;    // constant acceleration
  M x_t;  // CAF interpolant at t
};

/// Ground-truth (v, a, x_t) for known pairs at time t.
template <typename A, typename B>
ExactFields<typename A::PlainObject> exact_field_oracle(const Eigen::MatrixBase<A>& x0,
                                                        const Eigen::MatrixBase<B>& x1, double t, double h) {
  auto v = velocity_target(x0, x1, h);
  auto a = acceleration_target(x0, x1, v);
  auto x_t = interp_caf(x0, x1, t, v);
  return {std::move(v), std::move(a), std::move(x_t)};
}

}  // namespace caf

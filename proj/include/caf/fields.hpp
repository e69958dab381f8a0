#pragma once

// Vector fields consumed by the samplers. Fields act on batches: a velocity
// field maps (x: d x B, t) to a d x B velocity, an acceleration field maps
// (x, t, v) to a d x B acceleration where v is the initial velocity carried
// along each trajectory.
//
// Network inputs are plain concatenations: [x; t] for velocity nets and
// [x; t; v] (or [x; t] without conditioning) for acceleration nets.

#include <concepts>
#include <cstddef>
#include <utility>

#include "caf/error.hpp"
#include "caf/flowcore.hpp"
#include "caf/nnsub.hpp"

namespace caf {

template <typename F>
concept VelocityField = requires(const F& f, const Mat& x, double t) {
  { f(x, t) } -> std::convertible_to<Mat>;
};

template <typename F>
concept AccelerationField = requires(const F& f, const Mat& x, double t, const Mat& v) {
  { f(x, t, v) } -> std::convertible_to<Mat>;
};

/// [x; t] with one time per column.
inline Mat velocity_input(const Mat& x, const Eigen::RowVectorXd& t) {
  if (t.size() != x.cols()) throw ShapeError("velocity_input: one time per column required");
  Mat in(x.rows() + 1, x.cols());
  in.topRows(x.rows()) = x;
  in.row(x.rows()) = t;
  return in;
}

inline Mat velocity_input(const Mat& x, double t) {
  return velocity_input(x, Eigen::RowVectorXd::Constant(x.cols(), t));
}

/// [x; t; v] when conditioned on the initial velocity, otherwise [x; t].
inline Mat acceleration_input(const Mat& x, const Eigen::RowVectorXd& t, const Mat& v, bool ivc) {
  if (!ivc) return velocity_input(x, t);
  if (v.rows() != x.rows() || v.cols() != x.cols()) throw ShapeError("acceleration_input: v shape differs from x");
  Mat in(2 * x.rows() + 1, x.cols());
  in.topRows(x.rows()) = x;
  in.row(x.rows()) = t;
  in.bottomRows(x.rows()) = v;
  return in;
}

inline Mat acceleration_input(const Mat& x, double t, const Mat& v, bool ivc) {
  return acceleration_input(x, Eigen::RowVectorXd::Constant(x.cols(), t), v, ivc);
}

/// Velocity network v(x, t). Borrows the model; the model must outlive the field.
class NetVelocity {
 public:
  explicit NetVelocity(const nn::MlpModel& model) : model_(&model) {}
  Mat operator()(const Mat& x, double t) const { return nn::forward_batch(*model_, velocity_input(x, t)); }
  const nn::MlpModel& model() const { return *model_; }

 private:
  const nn::MlpModel* model_;
};

/// Acceleration network a(x, t[, v]).
class NetAcceleration {
 public:
  NetAcceleration(const nn::MlpModel& model, bool ivc) : model_(&model), ivc_(ivc) {}
  Mat operator()(const Mat& x, double t, const Mat& v) const {
    return nn::forward_batch(*model_, acceleration_input(x, t, v, ivc_));
  }
  bool ivc() const { return ivc_; }

 private:
  const nn::MlpModel* model_;
  bool ivc_;
};

/// Ground-truth fields for known pairs, column-aligned with the batch being
/// simulated: v = h (x1 - x0) wherever it is queried, a = 2 (x1 - x0) - 2 v.
class ExactVelocity {
 public:
  ExactVelocity(Mat x0, Mat x1, double h) : v_(velocity_target(x0, x1, h)) {}
  Mat operator()(const Mat& x, double) const {
    if (x.cols() != v_.cols()) throw ShapeError("ExactVelocity: batch size differs from the pair set");
    return v_;
  }

 private:
  Mat v_;
};

class ExactAcceleration {
 public:
  ExactAcceleration(Mat x0, Mat x1) : disp2_(2.0 * (x1 - x0)) {}
  Mat operator()(const Mat& x, double, const Mat& v) const {
    if (x.cols() != disp2_.cols()) throw ShapeError("ExactAcceleration: batch size differs from the pair set");
    return disp2_ - 2.0 * v;
  }

 private:
  Mat disp2_;
};

/// The same vector for every sample, or zero.
class ConstantVelocity {
 public:
  explicit ConstantVelocity(Vec c) : c_(std::move(c)) {}
  Mat operator()(const Mat& x, double) const { return c_.replicate(1, x.cols()); }

 private:
  Vec c_;
};

class ConstantAcceleration {
 public:
  explicit ConstantAcceleration(Vec c) : c_(std::move(c)) {}
  Mat operator()(const Mat& x, double, const Mat&) const { return c_.replicate(1, x.cols()); }

 private:
  Vec c_;
};

/// Counts per-sample evaluations of a wrapped field.
struct NfeCounter {
  std::size_t evaluations = 0;
  std::size_t calls = 0;
};

template <typename F>
class Counted {
 public:
  Counted(F inner, NfeCounter& counter) : inner_(std::move(inner)), counter_(&counter) {}

  Mat operator()(const Mat& x, double t) const
    requires VelocityField<F>
  {
    tally(x);
    return inner_(x, t);
  }

  Mat operator()(const Mat& x, double t, const Mat& v) const
    requires AccelerationField<F>
  {
    tally(x);
    return inner_(x, t, v);
  }

 private:
  void tally(const Mat& x) const {
    counter_->evaluations += static_cast<std::size_t>(x.cols());
    counter_->calls += 1;
  }

  F inner_;
  NfeCounter* counter_;
};

}  // namespace caf

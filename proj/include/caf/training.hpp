#pragma once

// Objectives and training loops: rectified flow, reflow, CAF initial
// velocity, and CAF acceleration with initial-velocity conditioning.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "caf/datasets.hpp"
#include "caf/error.hpp"
#include "caf/fields.hpp"
#include "caf/flowcore.hpp"
#include "caf/nnsub.hpp"
#include "caf/rng.hpp"
#include "caf/sampling.hpp"

namespace caf {

struct Architecture {
  int hidden_layers = 5;
  int hidden_units = 128;
  nn::Activation activation = nn::Activation::relu;
};

/// v(x, t): input [x; t], output d.
inline nn::MlpModel make_velocity_model(int dim, const Architecture& arch, std::uint64_t seed) {
  return nn::MlpModel::dense(dim + 1, dim, arch.hidden_layers, arch.hidden_units, arch.activation, seed);
}

/// a(x, t[, v]): input [x; t; v] with conditioning, [x; t] without.
inline nn::MlpModel make_acceleration_model(int dim, const Architecture& arch, bool ivc, std::uint64_t seed) {
  return nn::MlpModel::dense(ivc ? 2 * dim + 1 : dim + 1, dim, arch.hidden_layers, arch.hidden_units,
                             arch.activation, seed);
}

enum class Objective { rectified_flow, caf_velocity, caf_acceleration };

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 256;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  FlowConfig flow;
  /// Condition the acceleration net on the initial velocity.
  bool ivc = true;
  /// Condition on the ground-truth v during training instead of the frozen
  /// velocity net's estimate. Meaningless without ivc.
  bool teacher_forcing = true;
  /// Loss above this (or non-finite) aborts the run.
  double divergence_threshold = 1e6;

  void validate(std::size_t coupling_size) const {
    flow.validate();
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (static_cast<std::size_t>(batch_size) > coupling_size)
      throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds coupling size " +
                        std::to_string(coupling_size));
    if (!(lr > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0))
      throw ConfigError("invalid Adam hyperparameters");
  }
};

struct TrainReport {
  std::vector<double> loss_curve;
  std::vector<double> elapsed;  // cumulative seconds after each iteration
  double final_loss = 0.0;
  double wallclock = 0.0;
  TrainConfig config;
  Objective objective = Objective::rectified_flow;
};

/// CSV loss log with columns iteration, loss, wallclock.
inline void write_loss_log(const TrainReport& report, std::ostream& os) {
  os << "iteration,loss,wallclock\n";
  char buf[96];
  for (std::size_t i = 0; i < report.loss_curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.6f\n", i, report.loss_curve[i], report.elapsed[i]);
    os << buf;
  }
}

struct LossResult {
  double value = 0.0;
  nn::ParamSet grads;
};

struct AccelerationLossResult {
  double value = 0.0;
  nn::ParamSet acceleration_grads;
  /// Always zero: the target and the conditioning input are stop-gradient.
  nn::ParamSet velocity_grads;
};

namespace detail {

inline void require_batch(const Mat& x0, const Mat& x1, const Eigen::RowVectorXd& t) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) throw ShapeError("loss: x0/x1 shapes differ");
  if (t.size() != x0.cols()) throw ShapeError("loss: one time per pair required");
  if (x0.cols() == 0) throw ConfigError("loss: empty batch");
  for (Eigen::Index j = 0; j < t.size(); ++j)
    if (!(t(j) >= 0.0 && t(j) <= 1.0)) throw ConfigError("loss: t must lie in [0, 1]");
}

/// Column-wise (1-t) x0 + t x1.
inline Mat interp_rf_batch(const Mat& x0, const Mat& x1, const Eigen::RowVectorXd& t) {
  return (x0.array().rowwise() * (1.0 - t.array()) + x1.array().rowwise() * t.array()).matrix();
}

/// Column-wise (1-t^2) x0 + t^2 x1 + (t-t^2) v.
inline Mat interp_caf_batch(const Mat& x0, const Mat& x1, const Eigen::RowVectorXd& t, const Mat& v) {
  const Eigen::ArrayXXd t2 = t.array().square();
  return (x0.array().rowwise() * (1.0 - t2.row(0)) + x1.array().rowwise() * t2.row(0) +
          v.array().rowwise() * (t.array() - t2.row(0)))
      .matrix();
}

/// Mean squared L2 regression of `model(input)` onto `target`.
inline LossResult regress(const nn::MlpModel& model, const Mat& input, const Mat& target, const char* what) {
  nn::ForwardCache cache;
  const Mat out = nn::forward_batch(model, input, &cache);
  const Mat diff = out - target;
  const double n = static_cast<double>(target.cols());
  const double value = diff.squaredNorm() / n;
  if (!std::isfinite(value))
    throw NumericError(std::string(what) + ": non-finite loss (max |output| = " +
                       std::to_string(out.cwiseAbs().maxCoeff()) + ")");
  auto g = nn::backward_batch(model, cache, (2.0 / n) * diff);
  return {value, std::move(g.params)};
}

}  // namespace detail

/// mean ||(x1 - x0) - v(x_t, t)||^2 with x_t on the straight line.
inline LossResult rf_velocity_loss(const Mat& x0, const Mat& x1, const nn::MlpModel& model,
                                   const Eigen::RowVectorXd& t) {
  detail::require_batch(x0, x1, t);
  const Mat xt = detail::interp_rf_batch(x0, x1, t);
  return detail::regress(model, velocity_input(xt, t), x1 - x0, "rf_velocity_loss");
}

/// mean ||h (x1 - x0) - v(x_t, t)||^2 with x_t on the CAF interpolant.
inline LossResult caf_velocity_loss(const Mat& x0, const Mat& x1, const nn::MlpModel& model,
                                    const Eigen::RowVectorXd& t, double h) {
  detail::require_batch(x0, x1, t);
  const Mat v = velocity_target(x0, x1, h);
  const Mat xt = detail::interp_caf_batch(x0, x1, t, v);
  return detail::regress(model, velocity_input(xt, t), v, "caf_velocity_loss");
}

/// mean ||sg[a] - a_phi(x_t, t, v_cond)||^2. Gradients reach only the
/// acceleration net.
inline AccelerationLossResult caf_acceleration_loss(const Mat& x0, const Mat& x1, const nn::MlpModel& v_model,
                                                    const nn::MlpModel& a_model, const Eigen::RowVectorXd& t,
                                                    double h, bool ivc, bool teacher_forcing) {
  detail::require_batch(x0, x1, t);
  const Mat v = velocity_target(x0, x1, h);
  const Mat a = acceleration_target(x0, x1, v);
  const Mat xt = detail::interp_caf_batch(x0, x1, t, v);
  Mat cond;
  if (ivc) cond = teacher_forcing ? v : nn::forward_batch(v_model, velocity_input(xt, t));
  auto r = detail::regress(a_model, acceleration_input(xt, t, ivc ? cond : xt, ivc), a, "caf_acceleration_loss");
  return {r.value, std::move(r.grads), v_model.params().zeros_like()};
}

namespace detail {

/// Minibatch Adam driver. `loss(x0, x1, t)` returns a LossResult for the model.
template <typename LossFn>
TrainReport run_adam(nn::MlpModel& model, const Coupling& coupling, const TrainConfig& cfg, Objective objective,
                     LossFn&& loss) {
  if (coupling.empty()) throw ConfigError("train: coupling is empty");
  cfg.validate(coupling.size());
  const Mat src = coupling.sources(), tgt = coupling.targets();
  const auto d = src.rows();
  const auto B = cfg.batch_size;
  auto adam = nn::make_adam_state(model, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  CounterRng rng(cfg.seed, 0x7a11);
  TrainReport report;
  report.config = cfg;
  report.objective = objective;
  report.loss_curve.reserve(static_cast<std::size_t>(cfg.iterations));
  report.elapsed.reserve(static_cast<std::size_t>(cfg.iterations));
  const auto start = std::chrono::steady_clock::now();
  Mat x0(d, B), x1(d, B);
  Eigen::RowVectorXd t(B);
  for (int it = 0; it < cfg.iterations; ++it) {
    for (int j = 0; j < B; ++j) {
      const auto k = static_cast<Eigen::Index>(rng.below(coupling.size()));
      x0.col(j) = src.col(k);
      x1.col(j) = tgt.col(k);
      t(j) = rng.uniform();
    }
    LossResult r = loss(x0, x1, t);
    if (!(r.value <= cfg.divergence_threshold))
      throw NumericError("train: loss " + std::to_string(r.value) + " exceeded divergence threshold at iteration " +
                         std::to_string(it));
    nn::adam_update(model, adam, r.grads);
    report.loss_curve.push_back(r.value);
    report.elapsed.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  report.final_loss = report.loss_curve.back();
  report.wallclock = report.elapsed.back();
  return report;
}

}  // namespace detail

/// Trains a velocity net with the rectified-flow or CAF initial-velocity objective.
inline TrainReport train(nn::MlpModel& model, const Coupling& coupling, const TrainConfig& cfg, Objective objective) {
  switch (objective) {
    case Objective::rectified_flow:
      return detail::run_adam(model, coupling, cfg, objective, [&](const Mat& x0, const Mat& x1, const auto& t) {
        return rf_velocity_loss(x0, x1, model, t);
      });
    case Objective::caf_velocity:
      return detail::run_adam(model, coupling, cfg, objective, [&](const Mat& x0, const Mat& x1, const auto& t) {
        return caf_velocity_loss(x0, x1, model, t, cfg.flow.h);
      });
    case Objective::caf_acceleration:
      throw ConfigError("train: the acceleration objective needs a frozen velocity model; use train_acceleration");
  }
  throw ConfigError("train: unknown objective");
}

/// Trains the acceleration net against a frozen velocity net.
inline TrainReport train_acceleration(nn::MlpModel& a_model, const nn::MlpModel& v_model, const Coupling& coupling,
                                      const TrainConfig& cfg) {
  const int d = coupling.dim();
  if (a_model.input_dim() != (cfg.ivc ? 2 * d + 1 : d + 1) || a_model.output_dim() != d)
    throw ShapeError("train_acceleration: model input/output dims do not match ivc=" + std::to_string(cfg.ivc));
  return detail::run_adam(a_model, coupling, cfg, Objective::caf_acceleration,
                          [&](const Mat& x0, const Mat& x1, const auto& t) {
                            auto r = caf_acceleration_loss(x0, x1, v_model, a_model, t, cfg.flow.h, cfg.ivc,
                                                           cfg.teacher_forcing);
                            return LossResult{r.value, std::move(r.acceleration_grads)};
                          });
}

struct CafModels {
  nn::MlpModel velocity;
  nn::MlpModel acceleration;
  bool ivc = true;
};

struct CafTrainReport {
  TrainReport velocity;
  TrainReport acceleration;
};

/// Two-phase CAF training: the velocity net to completion, then the
/// acceleration net against the frozen velocity net.
inline CafTrainReport train_caf(CafModels& models, const Coupling& coupling, const TrainConfig& velocity_cfg,
                                const TrainConfig& acceleration_cfg) {
  CafTrainReport r;
  r.velocity = train(models.velocity, coupling, velocity_cfg, Objective::caf_velocity);
  const nn::MlpModel& frozen = models.velocity;
  r.acceleration = train_acceleration(models.acceleration, frozen, coupling, acceleration_cfg);
  models.ivc = acceleration_cfg.ivc;
  return r;
}

// ---------------------------------------------------------------------------
// Reflow

struct ReflowOptions {
  int sim_steps = 100;
  /// Abort when more than this fraction of trajectories is non-finite.
  double max_drop_fraction = 0.01;
  std::uint64_t source_stream = 3;
};

struct ReflowResult {
  Coupling coupling;
  std::size_t dropped = 0;
};

/// Pairs fresh source draws with their Euler pushforward under `velocity`.
template <VelocityField V>
ReflowResult reflow_field(const V& velocity, const DistributionSpec& src, std::size_t n_pairs, std::uint64_t seed,
                          std::string provenance, const ReflowOptions& opt = {}) {
  if (opt.sim_steps < 1) throw ConfigError("reflow: sim_steps must be >= 1");
  if (provenance.empty()) throw ConfigError("reflow: provenance must name the generating model");
  const Mat x0 = sample_matrix(src, n_pairs, seed, opt.source_stream);
  SamplerOptions so;
  so.abort_on_nonfinite = false;
  const Mat x1 = sample_rf(x0, velocity, opt.sim_steps, so).endpoints;
  ReflowResult r;
  r.coupling.mode = CouplingMode::deterministic;
  r.coupling.provenance = std::move(provenance);
  r.coupling.pairs.reserve(n_pairs);
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    if (!x1.col(j).allFinite()) {
      ++r.dropped;
      continue;
    }
    r.coupling.pairs.push_back({x0.col(j), x1.col(j)});
  }
  if (static_cast<double>(r.dropped) > opt.max_drop_fraction * static_cast<double>(n_pairs))
    throw NumericError("reflow: " + std::to_string(r.dropped) + " of " + std::to_string(n_pairs) +
                       " trajectories were non-finite");
  return r;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Deterministic coupling (x0, Phi(x0)) from a trained rectified-flow model.
inline Coupling reflow(const nn::MlpModel& rf_model, const DistributionSpec& src, std::size_t n_pairs, int sim_steps,
                       std::uint64_t seed) {
  ReflowOptions opt;
  opt.sim_steps = sim_steps;
  std::string prov = "reflow model=" + hex64(nn::model_hash(rf_model)) + " steps=" + std::to_string(sim_steps) +
                     " seed=" + std::to_string(seed);
  return reflow_field(NetVelocity(rf_model), src, n_pairs, seed, std::move(prov), opt).coupling;
}

}  // namespace caf

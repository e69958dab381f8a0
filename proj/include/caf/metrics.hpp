#pragma once

// Straightness, coupling preservation and sample-quality metrics.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "caf/datasets.hpp"
#include "caf/error.hpp"
#include "caf/fields.hpp"
#include "caf/rng.hpp"
#include "caf/sampling.hpp"

namespace caf {

struct MetricReport {
  std::string name;
  double value = 0.0;
  std::size_t n_samples = 0;
  std::string config;         // free-form echo of what was measured
  double ci_halfwidth = 0.0;  // bootstrap or normal-approximation 95%
};

inline constexpr const char* kMetricsCsvHeader = "name,value,ci,n,config_hash";

/// One ledger row: name, value, ci, n, config hash.
inline std::string metric_csv_row(const MetricReport& m, const std::string& config_hash) {
  char buf[128];
  std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%zu,", m.value, m.ci_halfwidth, m.n_samples);
  return m.name + buf + config_hash;
}

namespace detail {

/// Half-width of the central 95% interval of the bootstrapped mean.
inline double bootstrap_ci(const std::vector<double>& values, std::uint64_t seed, int resamples = 200) {
  if (values.size() < 2) return 0.0;
  CounterRng rng(seed, 0xb007);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[rng.below(values.size())];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  const auto q = [&](double p) {
    const auto idx = static_cast<std::size_t>(std::lround(p * static_cast<double>(means.size() - 1)));
    return means[idx];
  };
  return 0.5 * (q(0.975) - q(0.025));
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Flow straightness

/// || u/|u| - w/|w| ||^2 for displacement u and instantaneous velocity w.
inline double nfss_term(const Vec& displacement, const Vec& velocity) {
  return (displacement.normalized() - velocity.normalized()).squaredNorm();
}

struct NfssOptions {
  int n_t = 32;            // uniform t grid j / n_t, j = 0..n_t-1
  int substeps = 4;        // sampler steps between grid times
  double min_norm = 1e-12;
  double max_skip_fraction = 0.05;
  std::uint64_t seed = 0;  // bootstrap
};

namespace detail {

/// Averages NFSS terms per pair; `xdot(step, t, x)` gives the instantaneous
/// velocity of every column at a grid time.
template <typename Simulate>
MetricReport nfss_accumulate(const Coupling& coupling, const NfssOptions& opt, const std::string& name,
                             Simulate&& simulate) {
  if (coupling.empty()) throw ConfigError("nfss: empty coupling");
  if (opt.n_t < 1 || opt.substeps < 1) throw ConfigError("nfss: n_t and substeps must be >= 1");
  const Mat x0 = coupling.sources(), x1 = coupling.targets();
  const Mat disp = x1 - x0;
  const auto n = static_cast<std::size_t>(x0.cols());
  std::vector<double> sums(n, 0.0);
  std::vector<int> counts(n, 0);
  std::size_t skipped = 0, total = 0;
  auto on_grid = [&](const Mat& xdot) {
    for (std::size_t j = 0; j < n; ++j) {
      ++total;
      const auto col = static_cast<Eigen::Index>(j);
      const double dn = disp.col(col).norm(), vn = xdot.col(col).norm();
      if (dn < opt.min_norm || vn < opt.min_norm || !std::isfinite(vn)) {
        ++skipped;
        continue;
      }
      sums[j] += (disp.col(col) / dn - xdot.col(col) / vn).squaredNorm();
      counts[j] += 1;
    }
  };
  simulate(x0, on_grid);
  if (static_cast<double>(skipped) > opt.max_skip_fraction * static_cast<double>(total))
    throw NumericError("nfss: " + std::to_string(skipped) + " of " + std::to_string(total) +
                       " terms had degenerate norms");
  std::vector<double> per_pair;
  for (std::size_t j = 0; j < n; ++j)
    if (counts[j] > 0) per_pair.push_back(sums[j] / counts[j]);
  MetricReport r;
  r.name = name;
  r.value = mean_of(per_pair);
  r.n_samples = per_pair.size();
  r.ci_halfwidth = bootstrap_ci(per_pair, opt.seed);
  r.config = "n_t=" + std::to_string(opt.n_t) + " substeps=" + std::to_string(opt.substeps);
  return r;
}

}  // namespace detail

/// NFSS of a rectified flow: xdot_t = v(x_t, t) along Euler paths.
template <VelocityField V>
MetricReport nfss_rf(const Coupling& coupling, const V& velocity, const NfssOptions& opt = {}) {
  return detail::nfss_accumulate(coupling, opt, "nfss_rf", [&](const Mat& x0, auto&& on_grid) {
    SamplerOptions so;
    so.observer = [&](int step, double t, const Mat& x) {
      if (step % opt.substeps == 0 && step < opt.n_t * opt.substeps) on_grid(velocity(x, t));
    };
    sample_rf(x0, velocity, opt.n_t * opt.substeps, so);
  });
}

/// NFSS of a CAF model: xdot_t = v(x0) + a(x_t, t, v(x0)) t along CAF paths.
template <VelocityField V, AccelerationField A>
MetricReport nfss_caf(const Coupling& coupling, const V& velocity, const A& accel, const NfssOptions& opt = {}) {
  return detail::nfss_accumulate(coupling, opt, "nfss_caf", [&](const Mat& x0, auto&& on_grid) {
    const Mat v0 = velocity(x0, 0.0);
    SamplerOptions so;
    so.observer = [&](int step, double t, const Mat& x) {
      if (step % opt.substeps == 0 && step < opt.n_t * opt.substeps) on_grid(v0 + t * accel(x, t, v0));
    };
    sample_caf_from_velocity(x0, v0, accel, opt.n_t * opt.substeps, so);
  });
}

// ---------------------------------------------------------------------------
// Coupling preservation

struct CouplingPreservation {
  MetricReport mean_l2;
  MetricReport psnr;
};

inline constexpr double kPsnrCapDb = 300.0;

/// Largest pairwise distance among the columns.
inline double diameter(const Mat& points) {
  double best = 0.0;
  for (Eigen::Index i = 0; i < points.cols(); ++i)
    for (Eigen::Index j = i + 1; j < points.cols(); ++j)
      best = std::max(best, (points.col(i) - points.col(j)).squaredNorm());
  return std::sqrt(best);
}

/// For each pair, x1_hat = sampler(x0, N); reports mean ||x1_hat - x1|| and
/// 10 log10(range^2 / MSE) where range is the diameter of the x1 set and MSE
/// is the per-coordinate mean squared error.
inline CouplingPreservation coupling_preservation(const Coupling& pairs,
                                                  const std::function<Mat(const Mat&, int)>& sampler, int n_steps,
                                                  const std::string& label = "coupling", std::uint64_t seed = 0) {
  if (pairs.empty()) throw ConfigError("coupling_preservation: empty split");
  const Mat x0 = pairs.sources(), x1 = pairs.targets();
  const Mat x1_hat = sampler(x0, n_steps);
  if (x1_hat.rows() != x1.rows() || x1_hat.cols() != x1.cols())
    throw ShapeError("coupling_preservation: sampler output shape differs from targets");
  const Eigen::VectorXd err = (x1_hat - x1).colwise().norm().transpose();
  std::vector<double> errs(err.data(), err.data() + err.size());
  const double mse = (x1_hat - x1).squaredNorm() / static_cast<double>(x1.size());
  const double range = diameter(x1);
  CouplingPreservation r;
  const std::string cfg = label + " N=" + std::to_string(n_steps);
  r.mean_l2 = {label + "_l2", detail::mean_of(errs), errs.size(), cfg, detail::bootstrap_ci(errs, seed)};
  const double psnr = mse > 0.0 ? std::min(kPsnrCapDb, 10.0 * std::log10(range * range / mse)) : kPsnrCapDb;
  r.psnr = {label + "_psnr", psnr, errs.size(), cfg, 0.0};
  return r;
}

// ---------------------------------------------------------------------------
// Sliced Wasserstein

/// Wasserstein-1 between two 1-D empirical measures: integral of |F_a - F_b|.
inline double wasserstein1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ConfigError("wasserstein1_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t ia = 0, ib = 0;
  double total = 0.0;
  double x = std::min(a.front(), b.front());
  while (ia < a.size() || ib < b.size()) {
    while (ia < a.size() && a[ia] <= x) ++ia;
    while (ib < b.size() && b[ib] <= x) ++ib;
    if (ia == a.size() && ib == b.size()) break;
    const double next = std::min(ia < a.size() ? a[ia] : b[ib], ib < b.size() ? b[ib] : a[ia]);
    total += std::abs(static_cast<double>(ia) / na - static_cast<double>(ib) / nb) * (next - x);
    x = next;
  }
  return total;
}

inline constexpr std::size_t kMinSlicedSamples = 100;

/// Mean 1-D W1 over random unit directions. Both sets need >= 100 samples.
inline MetricReport sliced_wasserstein(const Mat& a, const Mat& b, int n_projections, std::uint64_t seed) {
  if (a.rows() != b.rows()) throw ShapeError("sliced_wasserstein: dimensions differ");
  if (static_cast<std::size_t>(a.cols()) < kMinSlicedSamples || static_cast<std::size_t>(b.cols()) < kMinSlicedSamples)
    throw ConfigError("sliced_wasserstein: each sample set needs at least 100 points");
  if (n_projections < 1) throw ConfigError("sliced_wasserstein: n_projections must be >= 1");
  CounterRng rng(seed, 0x5a);
  std::vector<double> per_dir;
  per_dir.reserve(static_cast<std::size_t>(n_projections));
  for (int p = 0; p < n_projections; ++p) {
    Vec dir(a.rows());
    do {
      for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = rng.normal();
    } while (dir.norm() < 1e-12);
    dir.normalize();
    const Eigen::RowVectorXd pa = dir.transpose() * a, pb = dir.transpose() * b;
    per_dir.push_back(wasserstein1_1d({pa.data(), pa.data() + pa.size()}, {pb.data(), pb.data() + pb.size()}));
  }
  MetricReport r;
  r.name = "sliced_wasserstein";
  r.value = detail::mean_of(per_dir);
  r.n_samples = static_cast<std::size_t>(std::min(a.cols(), b.cols()));
  r.config = "projections=" + std::to_string(n_projections);
  double var = 0.0;
  for (double x : per_dir) var += (x - r.value) * (x - r.value);
  if (per_dir.size() > 1) var /= static_cast<double>(per_dir.size() - 1);
  r.ci_halfwidth = 1.96 * std::sqrt(var / static_cast<double>(per_dir.size()));
  return r;
}

// ---------------------------------------------------------------------------
// Per-trajectory straightness

/// Largest perpendicular distance from the chord x_first -> x_last, divided by
/// the chord length. Empty when the chord is degenerate.
inline std::optional<double> straightness_per_trajectory(const TrajectoryLog& log) {
  if (log.points.size() < 3) throw ConfigError("straightness: need at least 3 logged points");
  const Vec& start = log.points.front();
  const Vec chord = log.points.back() - start;
  const double len = chord.norm();
  if (len < 1e-12) return std::nullopt;
  const Vec u = chord / len;
  double worst = 0.0;
  for (const auto& p : log.points) {
    const Vec rel = p - start;
    worst = std::max(worst, (rel - rel.dot(u) * u).norm());
  }
  return worst / len;
}

}  // namespace caf

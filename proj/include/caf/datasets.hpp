#pragma once

// Source/target distributions, couplings, and coupling persistence.
//
// Fixed parameterizations of the 2-D catalog (all centered near the origin):
//   two_moons     unit-radius moons, upper arc (cos u, sin u), lower arc
//                 (1 - cos u, 0.5 - sin u), u ~ U[0, pi]; shifted by
//                 (-0.5, -0.25), scaled by 2, then isotropic N(0, noise^2).
//   checkerboard  uniform over the 8 dark cells of a 4x4 board on [-2, 2]^2,
//                 dark meaning (row + col) even.
//   swiss_roll    u ~ U[0, 1], r = 1.5 pi (1 + 2u), point (r cos r, r sin r) / 5,
//                 then N(0, noise^2).
//   gaussian_mixture  explicit means / weights / isotropic scales;
//                 eight_gaussians() places 8 equal-weight modes on a circle.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "caf/detail/bytes.hpp"
#include "caf/error.hpp"
#include "caf/nnsub.hpp"
#include "caf/rng.hpp"

namespace caf {

enum class DistributionKind { standard_gaussian, gaussian_mixture, two_moons, checkerboard, swiss_roll, point_set };

inline std::string to_string(DistributionKind k) {
  switch (k) {
    case DistributionKind::standard_gaussian: return "standard_gaussian";
    case DistributionKind::gaussian_mixture: return "gaussian_mixture";
    case DistributionKind::two_moons: return "two_moons";
    case DistributionKind::checkerboard: return "checkerboard";
    case DistributionKind::swiss_roll: return "swiss_roll";
    case DistributionKind::point_set: return "point_set";
  }
  return "unknown";
}

inline DistributionKind distribution_kind_from_string(const std::string& s) {
  for (auto k : {DistributionKind::standard_gaussian, DistributionKind::gaussian_mixture, DistributionKind::two_moons,
                 DistributionKind::checkerboard, DistributionKind::swiss_roll, DistributionKind::point_set})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown distribution kind '" + s + "'");
}

struct DistributionSpec {
  DistributionKind kind = DistributionKind::standard_gaussian;
  int dim = 2;
  double noise = 0.0;             // two_moons, swiss_roll
  std::vector<Vec> means;         // gaussian_mixture
  std::vector<double> weights;    // gaussian_mixture
  std::vector<double> scales;     // gaussian_mixture, per-mode std
  std::vector<Vec> points;        // point_set

  static DistributionSpec standard_gaussian(int dim = 2) {
    DistributionSpec s;
    s.dim = dim;
    return s;
  }

  static DistributionSpec two_moons(double noise = 0.05) {
    DistributionSpec s;
    s.kind = DistributionKind::two_moons;
    s.noise = noise;
    return s;
  }

  static DistributionSpec checkerboard() {
    DistributionSpec s;
    s.kind = DistributionKind::checkerboard;
    return s;
  }

  static DistributionSpec swiss_roll(double noise = 0.05) {
    DistributionSpec s;
    s.kind = DistributionKind::swiss_roll;
    s.noise = noise;
    return s;
  }

  static DistributionSpec mixture(std::vector<Vec> means, std::vector<double> weights, std::vector<double> scales) {
    DistributionSpec s;
    s.kind = DistributionKind::gaussian_mixture;
    s.dim = means.empty() ? 0 : static_cast<int>(means.front().size());
    s.means = std::move(means);
    s.weights = std::move(weights);
    s.scales = std::move(scales);
    return s;
  }

  static DistributionSpec eight_gaussians(double radius = 3.0, double scale = 0.2) {
    std::vector<Vec> means;
    for (int k = 0; k < 8; ++k) {
      const double angle = 2.0 * std::numbers::pi * k / 8.0;
      means.push_back(Vec{{radius * std::cos(angle), radius * std::sin(angle)}});
    }
    return mixture(std::move(means), std::vector<double>(8, 1.0 / 8.0), std::vector<double>(8, scale));
  }

  static DistributionSpec point_set(std::vector<Vec> points) {
    DistributionSpec s;
    s.kind = DistributionKind::point_set;
    s.dim = points.empty() ? 0 : static_cast<int>(points.front().size());
    s.points = std::move(points);
    return s;
  }

  void validate() const {
    if (dim < 1) throw ConfigError("distribution dim must be positive");
    switch (kind) {
      case DistributionKind::standard_gaussian: break;
      case DistributionKind::two_moons:
      case DistributionKind::checkerboard:
      case DistributionKind::swiss_roll:
        if (dim != 2) throw ConfigError(to_string(kind) + " is only defined in 2 dimensions");
        if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("noise must be finite and >= 0");
        break;
      case DistributionKind::gaussian_mixture: {
        if (means.empty()) throw ConfigError("gaussian_mixture needs at least one mode");
        if (weights.size() != means.size() || scales.size() != means.size())
          throw ConfigError("gaussian_mixture: means, weights and scales must have equal length");
        double total = 0.0;
        for (std::size_t k = 0; k < means.size(); ++k) {
          if (means[k].size() != dim) throw ConfigError("gaussian_mixture: mean dimension mismatch");
          if (!(weights[k] > 0.0)) throw ConfigError("gaussian_mixture: weights must be positive");
          if (!(scales[k] >= 0.0)) throw ConfigError("gaussian_mixture: scales must be >= 0");
          total += weights[k];
        }
        if (std::abs(total - 1.0) > 1e-12) throw ConfigError("gaussian_mixture: weights must sum to 1");
        break;
      }
      case DistributionKind::point_set:
        if (points.empty()) throw ConfigError("point_set needs a non-empty point list");
        for (const auto& p : points)
          if (p.size() != dim) throw ConfigError("point_set: point dimension mismatch");
        break;
    }
  }
};

/// n i.i.d. draws as the columns of a (dim x n) matrix.
inline Mat sample_matrix(const DistributionSpec& spec, std::size_t n, std::uint64_t seed, std::uint64_t stream = 0) {
  spec.validate();
  if (n < 1) throw ConfigError("sample count must be >= 1");
  CounterRng rng(seed, stream);
  Mat out(spec.dim, static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    auto col = out.col(j);
    switch (spec.kind) {
      case DistributionKind::standard_gaussian:
        for (int i = 0; i < spec.dim; ++i) col(i) = rng.normal();
        break;
      case DistributionKind::gaussian_mixture: {
        double u = rng.uniform(), acc = 0.0;
        std::size_t k = 0;
        for (; k + 1 < spec.weights.size(); ++k) {
          acc += spec.weights[k];
          if (u < acc) break;
        }
        for (int i = 0; i < spec.dim; ++i) col(i) = spec.means[k](i) + spec.scales[k] * rng.normal();
        break;
      }
      case DistributionKind::two_moons: {
        const bool upper = rng.uniform() < 0.5;
        const double u = std::numbers::pi * rng.uniform();
        double x = upper ? std::cos(u) : 1.0 - std::cos(u);
        double y = upper ? std::sin(u) : 0.5 - std::sin(u);
        col(0) = 2.0 * (x - 0.5) + spec.noise * rng.normal();
        col(1) = 2.0 * (y - 0.25) + spec.noise * rng.normal();
        break;
      }
      case DistributionKind::checkerboard: {
        const auto cell = rng.below(8);  // enumerate dark cells row by row
        const auto row = static_cast<int>(cell / 2);
        const auto c = static_cast<int>(2 * (cell % 2) + (row % 2));
        col(0) = -2.0 + c + rng.uniform();
        col(1) = -2.0 + row + rng.uniform();
        break;
      }
      case DistributionKind::swiss_roll: {
        const double r = 1.5 * std::numbers::pi * (1.0 + 2.0 * rng.uniform());
        col(0) = r * std::cos(r) / 5.0 + spec.noise * rng.normal();
        col(1) = r * std::sin(r) / 5.0 + spec.noise * rng.normal();
        break;
      }
      case DistributionKind::point_set:
        col = spec.points[rng.below(spec.points.size())];
        break;
    }
  }
  return out;
}

inline std::vector<Vec> to_points(const Mat& m) {
  std::vector<Vec> pts;
  pts.reserve(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) pts.emplace_back(m.col(j));
  return pts;
}

inline Mat to_matrix(const std::vector<Vec>& pts) {
  if (pts.empty()) return {};
  Mat m(pts.front().size(), static_cast<Eigen::Index>(pts.size()));
  for (std::size_t j = 0; j < pts.size(); ++j) {
    if (pts[j].size() != m.rows()) throw ShapeError("to_matrix: points have mixed dimensions");
    m.col(static_cast<Eigen::Index>(j)) = pts[j];
  }
  return m;
}

inline std::vector<Vec> sample_distribution(const DistributionSpec& spec, std::size_t n, std::uint64_t seed) {
  return to_points(sample_matrix(spec, n, seed));
}

// ---------------------------------------------------------------------------
// Couplings

enum class CouplingMode : std::uint8_t { stochastic = 0, deterministic = 1 };

struct CouplingPair {
  Vec x0;
  Vec x1;
  friend bool operator==(const CouplingPair& a, const CouplingPair& b) { return a.x0 == b.x0 && a.x1 == b.x1; }
};

/// Ordered (x0, x1) pairs. Order is significant: preservation metrics compare by index.
struct Coupling {
  std::vector<CouplingPair> pairs;
  CouplingMode mode = CouplingMode::stochastic;
  std::string provenance;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
  int dim() const { return pairs.empty() ? 0 : static_cast<int>(pairs.front().x0.size()); }

  Mat sources() const {
    Mat m(dim(), static_cast<Eigen::Index>(size()));
    for (std::size_t j = 0; j < size(); ++j) m.col(static_cast<Eigen::Index>(j)) = pairs[j].x0;
    return m;
  }
  Mat targets() const {
    Mat m(dim(), static_cast<Eigen::Index>(size()));
    for (std::size_t j = 0; j < size(); ++j) m.col(static_cast<Eigen::Index>(j)) = pairs[j].x1;
    return m;
  }

  /// Pairs [begin, end) as a new coupling with the same mode and provenance.
  Coupling slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size()) throw ConfigError("coupling slice out of range");
    return {{pairs.begin() + static_cast<std::ptrdiff_t>(begin), pairs.begin() + static_cast<std::ptrdiff_t>(end)},
            mode,
            provenance};
  }

  /// The pairs repeated cyclically up to n entries.
  Coupling tiled(std::size_t n) const {
    if (empty()) throw ConfigError("cannot tile an empty coupling");
    Coupling c{{}, mode, provenance};
    c.pairs.reserve(n);
    for (std::size_t j = 0; j < n; ++j) c.pairs.push_back(pairs[j % size()]);
    return c;
  }

  void validate() const {
    const auto d = dim();
    for (const auto& p : pairs)
      if (p.x0.size() != d || p.x1.size() != d) throw ShapeError("coupling points must share one dimension");
    if (mode == CouplingMode::deterministic && provenance.empty())
      throw ConfigError("deterministic coupling requires provenance");
  }

  static Coupling from_matrices(const Mat& x0, const Mat& x1, CouplingMode mode, std::string provenance) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) throw ShapeError("coupling: source/target shapes differ");
    Coupling c{{}, mode, std::move(provenance)};
    c.pairs.reserve(static_cast<std::size_t>(x0.cols()));
    for (Eigen::Index j = 0; j < x0.cols(); ++j) c.pairs.push_back({x0.col(j), x1.col(j)});
    return c;
  }

  friend bool operator==(const Coupling& a, const Coupling& b) {
    return a.mode == b.mode && a.provenance == b.provenance && a.pairs == b.pairs;
  }
};

/// Independent draws from src and tgt, paired by index.
inline Coupling make_stochastic_coupling(const DistributionSpec& src, const DistributionSpec& tgt, std::size_t n,
                                         std::uint64_t seed) {
  if (src.dim != tgt.dim)
    throw ShapeError("stochastic coupling: source dim " + std::to_string(src.dim) + " != target dim " +
                     std::to_string(tgt.dim));
  return Coupling::from_matrices(sample_matrix(src, n, seed, 1), sample_matrix(tgt, n, seed, 2),
                                 CouplingMode::stochastic, "stochastic seed=" + std::to_string(seed));
}

/// Two pairs whose straight segments cross at t=0.5 in the point (0, 0.5).
inline Coupling crossing_fixture() {
  Coupling c;
  c.mode = CouplingMode::deterministic;
  c.provenance = "crossing_fixture";
  c.pairs.push_back({Vec{{-1.0, 0.0}}, Vec{{1.0, 1.0}}});
  c.pairs.push_back({Vec{{-1.0, 1.0}}, Vec{{1.0, 0.0}}});
  return c;
}

// "CPLG" | u32 version | u32 dim | u64 count | u8 mode | u32 len + provenance |
// f64 pairs (x0 then x1, interleaved per pair) | u32 crc32, little-endian.
inline constexpr std::uint32_t kCouplingVersion = 1;

inline std::vector<std::uint8_t> encode_coupling(const Coupling& c) {
  c.validate();
  caf::detail::ByteWriter w;
  w.raw("CPLG");
  w.uint(kCouplingVersion);
  w.uint(static_cast<std::uint32_t>(c.dim()));
  w.uint(static_cast<std::uint64_t>(c.size()));
  w.uint(static_cast<std::uint8_t>(c.mode));
  w.str(c.provenance);
  for (const auto& p : c.pairs) {
    for (Eigen::Index i = 0; i < p.x0.size(); ++i) w.f64(p.x0(i));
    for (Eigen::Index i = 0; i < p.x1.size(); ++i) w.f64(p.x1(i));
  }
  return std::move(w).finish_with_crc();
}

inline Coupling decode_coupling(std::span<const std::uint8_t> bytes) {
  caf::detail::ByteReader r(bytes.data(), bytes.size(), "coupling");
  if (r.remaining() < 8) r.fail("truncated payload");
  if (r.raw(4) != "CPLG") r.fail("bad magic");
  const auto version = r.uint<std::uint32_t>();
  if (version != kCouplingVersion) r.fail("unsupported format version " + std::to_string(version));
  r.check_crc();
  const auto dim = r.uint<std::uint32_t>();
  const auto count = r.uint<std::uint64_t>();
  const auto mode = r.uint<std::uint8_t>();
  if (mode > 1) r.fail("unknown coupling mode " + std::to_string(mode));
  Coupling c;
  c.mode = static_cast<CouplingMode>(mode);
  c.provenance = r.str();
  if (dim == 0 && count > 0) r.fail("zero dimension with non-empty pair list");
  const std::uint64_t pair_bytes = 2ull * dim * sizeof(double);
  if (pair_bytes != 0 && (count > r.remaining() / pair_bytes || r.remaining() != count * pair_bytes))
    r.fail("dim/count header does not match payload size");
  c.pairs.reserve(count);
  for (std::uint64_t j = 0; j < count; ++j) {
    CouplingPair p{Vec(dim), Vec(dim)};
    for (std::uint32_t i = 0; i < dim; ++i) p.x0(i) = r.f64();
    for (std::uint32_t i = 0; i < dim; ++i) p.x1(i) = r.f64();
    c.pairs.push_back(std::move(p));
  }
  return c;
}

inline void save_coupling(const Coupling& c, const std::string& path) {
  caf::detail::write_file(path, encode_coupling(c));
}

inline Coupling load_coupling(const std::string& path) {
  const auto bytes = caf::detail::read_file(path);
  return decode_coupling(bytes);
}

/// CSV with columns x0_0..x0_{d-1}, x1_0..x1_{d-1}.
inline void export_coupling_csv(const Coupling& c, std::ostream& os) {
  const int d = c.dim();
  for (int i = 0; i < d; ++i) os << (i ? "," : "") << "x0_" << i;
  for (int i = 0; i < d; ++i) os << ",x1_" << i;
  os << "\n" << std::setprecision(17);
  for (const auto& p : c.pairs) {
    for (int i = 0; i < d; ++i) os << (i ? "," : "") << p.x0(i);
    for (int i = 0; i < d; ++i) os << "," << p.x1(i);
    os << "\n";
  }
}

}  // namespace caf

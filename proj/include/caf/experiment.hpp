#pragma once

// Config-driven experiment harness: pipeline phases with an on-disk cache,
// metric ledgers, and the ablation grid.
//
// Output tree for one experiment:
//   <output_dir>/<config-hash>/config.json
//   <output_dir>/<config-hash>/checkpoints/*.ckpt, *_loss.csv
//   <output_dir>/<config-hash>/couplings/*.cplg
//   <output_dir>/<config-hash>/trajectories/*.csv
//   <output_dir>/<config-hash>/metrics.csv
//   <output_dir>/<config-hash>/plots/trajectories.svg
//   <output_dir>/cache/<phase>-<key>.*      shared between experiments

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "caf/datasets.hpp"
#include "caf/error.hpp"
#include "caf/fields.hpp"
#include "caf/flowcore.hpp"
#include "caf/metrics.hpp"
#include "caf/nnsub.hpp"
#include "caf/sampling.hpp"
#include "caf/svg.hpp"
#include "caf/training.hpp"

namespace caf::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// A pipeline phase failed; names the phase and the artifact it was producing.
class PhaseError : public Error {
 public:
  PhaseError(std::string phase, std::string artifact, const std::string& reason)
      : Error("phase '" + phase + "' failed (" + artifact + "): " + reason),
        phase_(std::move(phase)),
        artifact_(std::move(artifact)) {}
  const std::string& phase() const { return phase_; }
  const std::string& artifact() const { return artifact_; }

 private:
  std::string phase_, artifact_;
};

struct PhaseSchedule {
  int iterations = 2000;
  int batch_size = 256;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AblationToggles {
  bool acceleration_on = true;
  bool ivc_on = true;
  bool reflow_on = true;
};

struct MetricSelection {
  bool sliced_wasserstein = true;
  bool nfss = true;
  bool coupling_preservation = true;
  bool reconstruction = true;
  int n_eval = 1000;
  int projections = 64;
  int nfss_pairs = 256;
  int nfss_times = 32;
  int invert_steps = 10;
  int plot_paths = 64;
  int trajectory_steps = 32;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  DistributionSpec source = DistributionSpec::standard_gaussian();
  DistributionSpec target = DistributionSpec::two_moons();
  /// "stochastic" or "crossing_fixture" (source/target are then the fixture's points).
  std::string coupling = "stochastic";
  std::size_t n_pairs = 4096;
  std::size_t reflow_pairs = 4096;
  int reflow_steps = 100;
  Architecture architecture;
  PhaseSchedule rf_train;
  PhaseSchedule velocity_train;
  PhaseSchedule acceleration_train;
  FlowConfig flow;
  bool teacher_forcing = true;
  AblationToggles ablation;
  MetricSelection metrics;

  void validate() const;
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

/// Reads an object while recording consumed keys; leftovers are errors.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where() + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where() + ": unknown key '" + k + "'");
  }

  std::string sub(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vec json_vec(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of numbers");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(where + ": expected numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline std::vector<Vec> json_vecs(const json* j, const std::string& where) {
  std::vector<Vec> out;
  if (!j) return out;
  if (!j->is_array()) throw ConfigError(where + ": expected an array of points");
  for (const auto& e : *j) out.push_back(json_vec(e, where));
  return out;
}

}  // namespace detail

inline json to_json(const DistributionSpec& s) {
  json j{{"kind", to_string(s.kind)}, {"dim", s.dim}};
  switch (s.kind) {
    case DistributionKind::two_moons:
    case DistributionKind::swiss_roll: j["noise"] = s.noise; break;
    case DistributionKind::gaussian_mixture: {
      json means = json::array();
      for (const auto& m : s.means) means.push_back(detail::vec_json(m));
      j["means"] = means;
      j["weights"] = s.weights;
      j["scales"] = s.scales;
      break;
    }
    case DistributionKind::point_set: {
      json pts = json::array();
      for (const auto& p : s.points) pts.push_back(detail::vec_json(p));
      j["points"] = pts;
      break;
    }
    default: break;
  }
  return j;
}

/// Accepts the catalog kinds plus the shorthand {"kind": "eight_gaussians", "radius", "scale"}.
inline DistributionSpec distribution_from_json(const json& j, const std::string& path) {
  detail::StrictObject o(j, path);
  std::string kind;
  o.read("kind", kind);
  if (kind.empty()) throw ConfigError(path + ": missing 'kind'");
  DistributionSpec s;
  if (kind == "eight_gaussians") {
    double radius = 3.0, scale = 0.2;
    o.read("radius", radius);
    o.read("scale", scale);
    o.finish();
    s = DistributionSpec::eight_gaussians(radius, scale);
  } else {
    s.kind = distribution_kind_from_string(kind);
    o.read("dim", s.dim);
    if (s.kind == DistributionKind::two_moons || s.kind == DistributionKind::swiss_roll) {
      s.noise = 0.05;
      o.read("noise", s.noise);
    }
    if (s.kind == DistributionKind::gaussian_mixture) {
      s.means = detail::json_vecs(o.child("means"), o.sub("means"));
      o.read("weights", s.weights);
      o.read("scales", s.scales);
      if (!s.means.empty() && !j.contains("dim")) s.dim = static_cast<int>(s.means.front().size());
    }
    if (s.kind == DistributionKind::point_set) {
      s.points = detail::json_vecs(o.child("points"), o.sub("points"));
      if (!s.points.empty() && !j.contains("dim")) s.dim = static_cast<int>(s.points.front().size());
    }
    o.finish();
  }
  s.validate();
  return s;
}

inline json to_json(const PhaseSchedule& p) {
  return {{"iterations", p.iterations}, {"batch_size", p.batch_size}, {"lr", p.lr},
          {"beta1", p.beta1},           {"beta2", p.beta2},           {"eps", p.eps}};
}

inline PhaseSchedule schedule_from_json(const json& j, const std::string& path, PhaseSchedule p = {}) {
  detail::StrictObject o(j, path);
  o.read("iterations", p.iterations);
  o.read("batch_size", p.batch_size);
  o.read("lr", p.lr);
  o.read("beta1", p.beta1);
  o.read("beta2", p.beta2);
  o.read("eps", p.eps);
  o.finish();
  return p;
}

inline json to_json(const ExperimentConfig& c) {
  const auto& m = c.metrics;
  return {
      {"schema_version", kSchemaVersion},
      {"name", c.name},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"source", to_json(c.source)},
      {"target", to_json(c.target)},
      {"coupling", c.coupling},
      {"n_pairs", c.n_pairs},
      {"reflow_pairs", c.reflow_pairs},
      {"reflow_steps", c.reflow_steps},
      {"architecture",
       {{"hidden_layers", c.architecture.hidden_layers},
        {"hidden_units", c.architecture.hidden_units},
        {"activation", nn::to_string(c.architecture.activation)}}},
      {"rf_train", to_json(c.rf_train)},
      {"velocity_train", to_json(c.velocity_train)},
      {"acceleration_train", to_json(c.acceleration_train)},
      {"flow", {{"h", c.flow.h}, {"n_steps", c.flow.n_steps}, {"time_dist", "uniform"}, {"distance", "l2_squared"}}},
      {"teacher_forcing", c.teacher_forcing},
      {"ablation",
       {{"acceleration_on", c.ablation.acceleration_on},
        {"ivc_on", c.ablation.ivc_on},
        {"reflow_on", c.ablation.reflow_on}}},
      {"metrics",
       {{"sliced_wasserstein", m.sliced_wasserstein},
        {"nfss", m.nfss},
        {"coupling_preservation", m.coupling_preservation},
        {"reconstruction", m.reconstruction},
        {"n_eval", m.n_eval},
        {"projections", m.projections},
        {"nfss_pairs", m.nfss_pairs},
        {"nfss_times", m.nfss_times},
        {"invert_steps", m.invert_steps},
        {"plot_paths", m.plot_paths},
        {"trajectory_steps", m.trajectory_steps}}},
  };
}

inline ExperimentConfig config_from_json(const json& j) {
  detail::StrictObject o(j, "");
  int version = -1;
  o.read("schema_version", version);
  if (version != kSchemaVersion)
    throw ConfigError("schema_version must be " + std::to_string(kSchemaVersion) + " (got " +
                      std::to_string(version) + ")");
  ExperimentConfig c;
  o.read("name", c.name);
  o.read("seed", c.seed);
  o.read("output_dir", c.output_dir);
  if (auto* s = o.child("source")) c.source = distribution_from_json(*s, "source");
  if (auto* s = o.child("target")) c.target = distribution_from_json(*s, "target");
  o.read("coupling", c.coupling);
  o.read("n_pairs", c.n_pairs);
  o.read("reflow_pairs", c.reflow_pairs);
  o.read("reflow_steps", c.reflow_steps);
  if (auto* a = o.child("architecture")) {
    detail::StrictObject ao(*a, "architecture");
    ao.read("hidden_layers", c.architecture.hidden_layers);
    ao.read("hidden_units", c.architecture.hidden_units);
    std::string act = nn::to_string(c.architecture.activation);
    ao.read("activation", act);
    ao.finish();
    try {
      c.architecture.activation = nn::activation_from_string(act);
    } catch (const Error& e) {
      throw ConfigError(std::string("architecture.activation: ") + e.what());
    }
  }
  if (auto* p = o.child("rf_train")) c.rf_train = schedule_from_json(*p, "rf_train");
  if (auto* p = o.child("velocity_train")) c.velocity_train = schedule_from_json(*p, "velocity_train");
  if (auto* p = o.child("acceleration_train")) c.acceleration_train = schedule_from_json(*p, "acceleration_train");
  if (auto* f = o.child("flow")) {
    detail::StrictObject fo(*f, "flow");
    fo.read("h", c.flow.h);
    fo.read("n_steps", c.flow.n_steps);
    std::string td = "uniform", dist = "l2_squared";
    fo.read("time_dist", td);
    fo.read("distance", dist);
    fo.finish();
    if (td != "uniform") throw ConfigError("flow.time_dist: only 'uniform' is supported");
    if (dist != "l2_squared") throw ConfigError("flow.distance: only 'l2_squared' is supported");
  }
  o.read("teacher_forcing", c.teacher_forcing);
  if (auto* a = o.child("ablation")) {
    detail::StrictObject ao(*a, "ablation");
    ao.read("acceleration_on", c.ablation.acceleration_on);
    ao.read("ivc_on", c.ablation.ivc_on);
    ao.read("reflow_on", c.ablation.reflow_on);
    ao.finish();
  }
  if (auto* m = o.child("metrics")) {
    detail::StrictObject mo(*m, "metrics");
    auto& s = c.metrics;
    mo.read("sliced_wasserstein", s.sliced_wasserstein);
    mo.read("nfss", s.nfss);
    mo.read("coupling_preservation", s.coupling_preservation);
    mo.read("reconstruction", s.reconstruction);
    mo.read("n_eval", s.n_eval);
    mo.read("projections", s.projections);
    mo.read("nfss_pairs", s.nfss_pairs);
    mo.read("nfss_times", s.nfss_times);
    mo.read("invert_steps", s.invert_steps);
    mo.read("plot_paths", s.plot_paths);
    mo.read("trajectory_steps", s.trajectory_steps);
    mo.finish();
  }
  o.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

inline void ExperimentConfig::validate() const {
  source.validate();
  target.validate();
  if (coupling != "stochastic" && coupling != "crossing_fixture")
    throw ConfigError("coupling must be 'stochastic' or 'crossing_fixture'");
  if (coupling == "stochastic" && source.dim != target.dim) throw ConfigError("source and target dims differ");
  if (n_pairs < 1 || reflow_pairs < 1) throw ConfigError("n_pairs and reflow_pairs must be >= 1");
  if (reflow_steps < 1) throw ConfigError("reflow_steps must be >= 1");
  if (architecture.hidden_layers < 0 || architecture.hidden_units < 1) throw ConfigError("invalid architecture");
  flow.validate();
  for (const auto* p : {&rf_train, &velocity_train, &acceleration_train}) {
    if (p->iterations < 1 || p->batch_size < 1) throw ConfigError("iterations and batch_size must be >= 1");
    if (!(p->lr > 0.0)) throw ConfigError("lr must be positive");
  }
  const auto& m = metrics;
  if (m.n_eval < 1 || m.projections < 1 || m.nfss_pairs < 1 || m.nfss_times < 1 || m.invert_steps < 1 ||
      m.plot_paths < 0 || m.trajectory_steps < 1)
    throw ConfigError("metrics counts must be positive");
  if (m.sliced_wasserstein && static_cast<std::size_t>(m.n_eval) < kMinSlicedSamples)
    throw ConfigError("metrics.n_eval must be >= 100 for sliced_wasserstein");
}

/// Hash of the canonical serialization, excluding where outputs are written.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  const auto s = j.dump();
  return hex64(fnv1a64(s.data(), s.size()));
}

inline std::string json_hash(const json& j) {
  const auto s = j.dump();
  return hex64(fnv1a64(s.data(), s.size()));
}

// ---------------------------------------------------------------------------
// Files

/// Writes via a unique temporary and renames into place.
inline void atomic_write(const fs::path& path, const std::string& bytes) {
  fs::create_directories(path.parent_path());
  static std::atomic<unsigned> counter{0};
  const auto tmp = path.string() + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp);
  }
  fs::rename(tmp, path);
}

inline void atomic_write(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  atomic_write(path, std::string(bytes.begin(), bytes.end()));
}

inline std::string read_text(const fs::path& path) {
  const auto b = caf::detail::read_file(path.string());
  return {b.begin(), b.end()};
}

/// Exclusive advisory lock on a file for the object's lifetime.
class FileLock {
 public:
  explicit FileLock(const fs::path& path) {
    fs::create_directories(path.parent_path());
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0 || ::flock(fd_, LOCK_EX) != 0) throw Error("cannot lock " + path.string());
  }
  ~FileLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

// ---------------------------------------------------------------------------
// Pipeline

struct TrainedModels {
  bool caf = false;
  bool ivc = false;
  nn::MlpModel velocity;
  nn::MlpModel acceleration;  // meaningful only when caf
  std::string ids;
};

struct PipelineResult {
  std::string hash;
  fs::path dir;
  std::vector<MetricReport> metrics;
  std::vector<std::string> cache_hits;
};

class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg, bool force = false)
      : cfg_(std::move(cfg)), force_(force), hash_(config_hash(cfg_)) {
    cfg_.validate();
    root_ = fs::path(cfg_.output_dir);
    dir_ = root_ / hash_;
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const fs::path& dir() const { return dir_; }
  const std::vector<std::string>& cache_hits() const { return cache_hits_; }

  void write_config() const { atomic_write(dir_ / "config.json", to_json(cfg_).dump(2) + "\n"); }

  /// Stochastic draws or the tiled crossing fixture.
  const Coupling& base_coupling() {
    if (!base_) {
      const json key{{"coupling", cfg_.coupling},
                     {"source", to_json(cfg_.source)},
                     {"target", to_json(cfg_.target)},
                     {"n_pairs", cfg_.n_pairs},
                     {"seed", cfg_.seed}};
      base_ = cached_coupling("coupling", key, "base.cplg", [&] {
        if (cfg_.coupling == "crossing_fixture") return crossing_fixture().tiled(cfg_.n_pairs);
        return make_stochastic_coupling(cfg_.source, cfg_.target, cfg_.n_pairs, cfg_.seed);
      });
    }
    return *base_;
  }

  /// Source distribution used for reflow and fresh evaluation draws.
  DistributionSpec source_spec() const {
    if (cfg_.coupling == "crossing_fixture") return DistributionSpec::point_set(to_points(crossing_fixture().sources()));
    return cfg_.source;
  }

  DistributionSpec target_spec() const {
    if (cfg_.coupling == "crossing_fixture") return DistributionSpec::point_set(to_points(crossing_fixture().targets()));
    return cfg_.target;
  }

  /// 1-rectified flow on the base coupling.
  const nn::MlpModel& rf1() {
    if (!rf1_) {
      const auto& c = base_coupling();
      rf1_ = cached_model("train-rf", rf_key(cfg_.rf_train, c, cfg_.seed), "rf1", [&](const fs::path& log) {
        auto m = make_velocity_model(c.dim(), cfg_.architecture, cfg_.seed);
        auto rep = train(m, c, train_config(cfg_.rf_train, cfg_.seed), Objective::rectified_flow);
        write_loss(log, rep);
        return m;
      });
    }
    return *rf1_;
  }

  /// Deterministic coupling (x0, Phi_rf1(x0)).
  const Coupling& reflow_coupling() {
    if (!reflowed_) {
      const auto& m = rf1();
      const json key{{"model", hex64(nn::model_hash(m))},
                     {"source", to_json(source_spec())},
                     {"pairs", cfg_.reflow_pairs},
                     {"steps", cfg_.reflow_steps},
                     {"seed", cfg_.seed}};
      reflowed_ = cached_coupling("reflow", key, "reflow.cplg",
                                  [&] { return reflow(m, source_spec(), cfg_.reflow_pairs, cfg_.reflow_steps, cfg_.seed); });
    }
    return *reflowed_;
  }

  const Coupling& training_coupling() { return cfg_.ablation.reflow_on ? reflow_coupling() : base_coupling(); }

  /// The evaluated model: 1-RF, 2-RF, or CAF on the training coupling.
  const TrainedModels& models() {
    if (models_) return *models_;
    TrainedModels t;
    if (!cfg_.ablation.acceleration_on) {
      if (!cfg_.ablation.reflow_on) {
        t.velocity = rf1();
        t.ids = "rf1:" + hex64(nn::model_hash(t.velocity));
      } else {
        const auto& c = reflow_coupling();
        const auto seed = cfg_.seed + 1;
        t.velocity = cached_model("train-rf2", rf_key(cfg_.rf_train, c, seed), "rf2", [&](const fs::path& log) {
          auto m = make_velocity_model(c.dim(), cfg_.architecture, seed);
          write_loss(log, train(m, c, train_config(cfg_.rf_train, seed), Objective::rectified_flow));
          return m;
        });
        t.ids = "rf2:" + hex64(nn::model_hash(t.velocity));
      }
    } else {
      const auto& c = training_coupling();
      const auto seed = cfg_.seed + 1;
      const json vkey{{"arch", arch_json()},        {"schedule", to_json(cfg_.velocity_train)},
                      {"h", cfg_.flow.h},           {"seed", seed},
                      {"coupling", coupling_hash(c)}};
      t.caf = true;
      t.ivc = cfg_.ablation.ivc_on;
      t.velocity = cached_model("train-caf-velocity", vkey, "caf_velocity", [&](const fs::path& log) {
        auto m = make_velocity_model(c.dim(), cfg_.architecture, seed);
        auto vc = train_config(cfg_.velocity_train, seed);
        vc.flow.h = cfg_.flow.h;
        write_loss(log, train(m, c, vc, Objective::caf_velocity));
        return m;
      });
      const json akey{{"velocity", hex64(nn::model_hash(t.velocity))},
                      {"arch", arch_json()},
                      {"schedule", to_json(cfg_.acceleration_train)},
                      {"h", cfg_.flow.h},
                      {"ivc", t.ivc},
                      {"teacher_forcing", cfg_.teacher_forcing},
                      {"seed", seed + 1},
                      {"coupling", coupling_hash(c)}};
      t.acceleration = cached_model("train-caf-acceleration", akey, "caf_acceleration", [&](const fs::path& log) {
        auto m = make_acceleration_model(c.dim(), cfg_.architecture, t.ivc, seed + 1);
        auto ac = train_config(cfg_.acceleration_train, seed + 1);
        ac.flow.h = cfg_.flow.h;
        ac.ivc = t.ivc;
        ac.teacher_forcing = cfg_.teacher_forcing;
        write_loss(log, train_acceleration(m, t.velocity, c, ac));
        return m;
      });
      t.ids = "caf_velocity:" + hex64(nn::model_hash(t.velocity)) +
              " caf_acceleration:" + hex64(nn::model_hash(t.acceleration));
    }
    models_ = std::move(t);
    return *models_;
  }

  /// N-step samples of the evaluated model.
  Mat sample(const Mat& x0, int n_steps, const SamplerOptions& opt = {}) {
    const auto& m = models();
    if (m.caf) return sample_caf(x0, NetVelocity(m.velocity), NetAcceleration(m.acceleration, m.ivc), n_steps, opt).endpoints;
    return sample_rf(x0, NetVelocity(m.velocity), n_steps, opt).endpoints;
  }

  SampleResult sample_logged(const Mat& x0, int n_steps, std::size_t log_columns) {
    const auto& m = models();
    SamplerOptions opt;
    opt.log_columns = log_columns;
    opt.h = m.caf ? cfg_.flow.h : 1.0;
    opt.model_ids = m.ids;
    if (m.caf) return sample_caf(x0, NetVelocity(m.velocity), NetAcceleration(m.acceleration, m.ivc), n_steps, opt);
    return sample_rf(x0, NetVelocity(m.velocity), n_steps, opt);
  }

  ReconstructionResult reconstruct_points(const Mat& x1, int n_steps) {
    const auto& m = models();
    if (m.caf) return reconstruct(x1, NetVelocity(m.velocity), NetAcceleration(m.acceleration, m.ivc), n_steps);
    return reconstruct_rf(x1, NetVelocity(m.velocity), n_steps);
  }

  Mat fresh_sources(std::size_t n) const { return sample_matrix(source_spec(), n, cfg_.seed, 60); }
  Mat fresh_targets(std::size_t n, std::uint64_t stream = 61) const {
    return sample_matrix(target_spec(), n, cfg_.seed, stream);
  }

  /// Pairs never seen in training, built the same way as the training coupling.
  Coupling heldout_coupling(std::size_t n) {
    if (cfg_.ablation.reflow_on) {
      ReflowOptions opt;
      opt.sim_steps = cfg_.reflow_steps;
      opt.source_stream = 4;
      return reflow_field(NetVelocity(rf1()), source_spec(), n, cfg_.seed, "heldout reflow", opt).coupling;
    }
    if (cfg_.coupling == "crossing_fixture") return crossing_fixture().tiled(n);
    return make_stochastic_coupling(cfg_.source, cfg_.target, n, cfg_.seed + 0x9e37);
  }

  std::vector<MetricReport> evaluate() {
    const auto& ms = cfg_.metrics;
    const auto n_eval = static_cast<std::size_t>(ms.n_eval);
    const int N = cfg_.flow.n_steps;
    const auto& m = models();
    std::vector<MetricReport> out;
    auto tag = [&](MetricReport r, const std::string& name) {
      r.name = name;
      out.push_back(std::move(r));
    };
    const auto sampler = [&](const Mat& x, int n) { return sample(x, n); };
    if (ms.sliced_wasserstein) {
      const Mat gen = sample(fresh_sources(n_eval), N);
      tag(sliced_wasserstein(gen, fresh_targets(n_eval), ms.projections, cfg_.seed), "sliced_wasserstein");
      tag(sliced_wasserstein(fresh_targets(n_eval, 62), fresh_targets(n_eval, 63), ms.projections, cfg_.seed),
          "sliced_wasserstein_floor");
    }
    if (ms.nfss) {
      const auto& c = training_coupling();
      const Coupling sub = c.slice(0, std::min(c.size(), static_cast<std::size_t>(ms.nfss_pairs)));
      NfssOptions no;
      no.n_t = ms.nfss_times;
      no.seed = cfg_.seed;
      tag(m.caf ? nfss_caf(sub, NetVelocity(m.velocity), NetAcceleration(m.acceleration, m.ivc), no)
                : nfss_rf(sub, NetVelocity(m.velocity), no),
          "nfss");
    }
    if (ms.coupling_preservation) {
      const auto& c = training_coupling();
      const auto train_cp =
          coupling_preservation(c.slice(0, std::min(c.size(), n_eval)), sampler, N, "coupling_train", cfg_.seed);
      out.push_back(train_cp.mean_l2);
      out.push_back(train_cp.psnr);
      const auto held = coupling_preservation(heldout_coupling(n_eval), sampler, N, "coupling_heldout", cfg_.seed);
      out.push_back(held.mean_l2);
      out.push_back(held.psnr);
      const auto& b = base_coupling();
      const auto base = coupling_preservation(b.slice(0, std::min(b.size(), n_eval)), sampler, N, "coupling_base", cfg_.seed);
      out.push_back(base.mean_l2);
      out.push_back(base.psnr);
    }
    if (ms.reconstruction) {
      const auto r = reconstruct_points(fresh_targets(n_eval, 64), ms.invert_steps);
      std::vector<double> errs(r.errors.data(), r.errors.data() + r.errors.size());
      out.push_back({"reconstruction_l2", r.mean_error, errs.size(), "N=" + std::to_string(ms.invert_steps),
                     caf::detail::bootstrap_ci(errs, cfg_.seed)});
    }
    out.push_back({"nfe_per_sample", static_cast<double>(m.caf ? N + 1 : N), 1, "N=" + std::to_string(N), 0.0});
    return out;
  }

  void write_metrics(const std::vector<MetricReport>& ms) const {
    std::string s = std::string(kMetricsCsvHeader) + "\n";
    for (const auto& m : ms) s += metric_csv_row(m, hash_) + "\n";
    atomic_write(dir_ / "metrics.csv", s);
  }

  /// Logged paths from fresh sources; also written as CSV.
  std::vector<TrajectoryLog> trajectories() {
    const auto n = static_cast<std::size_t>(cfg_.metrics.plot_paths);
    auto r = sample_logged(fresh_sources(std::max<std::size_t>(n, 1)), cfg_.metrics.trajectory_steps, n);
    std::ostringstream os;
    export_trajectories_csv(r.logs, os);
    atomic_write(dir_ / "trajectories" / "paths.csv", os.str());
    return r.logs;
  }

  void plot() {
    const auto logs = trajectories();
    const auto& c = training_coupling();
    PlotOptions po;
    po.title = cfg_.name + " (" + hash_ + ")";
    std::ostringstream os;
    plot_trajectories(logs, c.slice(0, std::min<std::size_t>(c.size(), 1000)), os, po);
    atomic_write(dir_ / "plots" / "trajectories.svg", os.str());
  }

  PipelineResult run() {
    write_config();
    run_phase("plot", dir_ / "plots" / "trajectories.svg", [&] { plot(); });
    std::vector<MetricReport> ms;
    run_phase("metrics", dir_ / "metrics.csv", [&] {
      ms = evaluate();
      write_metrics(ms);
    });
    return {hash_, dir_, ms, cache_hits_};
  }

  /// Runs `f`, converting any failure into a PhaseError naming the phase.
  template <typename F>
  void run_phase(const std::string& phase, const fs::path& artifact, F&& f) {
    try {
      f();
    } catch (const PhaseError&) {
      throw;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw PhaseError(phase, artifact.string(), e.what());
    }
  }

 private:
  json arch_json() const {
    return {{"hidden_layers", cfg_.architecture.hidden_layers},
            {"hidden_units", cfg_.architecture.hidden_units},
            {"activation", nn::to_string(cfg_.architecture.activation)}};
  }

  static std::string coupling_hash(const Coupling& c) {
    const auto b = encode_coupling(c);
    return hex64(fnv1a64(b.data(), b.size()));
  }

  json rf_key(const PhaseSchedule& s, const Coupling& c, std::uint64_t seed) const {
    return {{"arch", arch_json()}, {"schedule", to_json(s)}, {"seed", seed}, {"coupling", coupling_hash(c)}};
  }

  static TrainConfig train_config(const PhaseSchedule& s, std::uint64_t seed) {
    TrainConfig t;
    t.iterations = s.iterations;
    t.batch_size = s.batch_size;
    t.lr = s.lr;
    t.beta1 = s.beta1;
    t.beta2 = s.beta2;
    t.eps = s.eps;
    t.seed = seed;
    return t;
  }

  static void write_loss(const fs::path& path, const TrainReport& rep) {
    std::ostringstream os;
    write_loss_log(rep, os);
    atomic_write(path, os.str());
  }

  static std::mutex& key_mutex(const std::string& key) {
    static std::mutex guard;
    static std::map<std::string, std::unique_ptr<std::mutex>> locks;
    std::lock_guard lk(guard);
    auto& m = locks[key];
    if (!m) m = std::make_unique<std::mutex>();
    return *m;
  }

  /// Loads `<cache>/<phase>-<key><ext>` or produces it, then mirrors it into `dest`.
  std::vector<std::uint8_t> cached_bytes(const std::string& phase, const json& key, const std::string& ext,
                                         const fs::path& dest, const std::function<std::vector<std::uint8_t>()>& make) {
    const auto k = json_hash(json{{"phase", phase}, {"key", key}});
    const fs::path cache = root_ / "cache" / (phase + "-" + k + ext);
    std::vector<std::uint8_t> bytes;
    run_phase(phase, dest, [&] {
      std::lock_guard lk(key_mutex(cache.string()));
      if (!force_ && fs::exists(cache)) {
        bytes = caf::detail::read_file(cache.string());
        cache_hits_.push_back(phase);
      } else {
        bytes = make();
        atomic_write(cache, bytes);
      }
      atomic_write(dest, bytes);
    });
    return bytes;
  }

  Coupling cached_coupling(const std::string& phase, const json& key, const std::string& file,
                           const std::function<Coupling()>& make) {
    const auto bytes =
        cached_bytes(phase, key, ".cplg", dir_ / "couplings" / file, [&] { return encode_coupling(make()); });
    return decode_coupling(bytes);
  }

  nn::MlpModel cached_model(const std::string& phase, const json& key, const std::string& stem,
                            const std::function<nn::MlpModel(const fs::path&)>& make) {
    const auto ckpt_dir = dir_ / "checkpoints";
    const auto bytes = cached_bytes(phase, key, ".ckpt", ckpt_dir / (stem + ".ckpt"), [&] {
      return nn::save_checkpoint(make(ckpt_dir / (stem + "_loss.csv")));
    });
    return nn::load_checkpoint(bytes);
  }

  ExperimentConfig cfg_;
  bool force_;
  std::string hash_;
  fs::path root_, dir_;
  std::optional<Coupling> base_, reflowed_;
  std::optional<nn::MlpModel> rf1_;
  std::optional<TrainedModels> models_;
  std::vector<std::string> cache_hits_;
};

inline PipelineResult run_pipeline(const ExperimentConfig& cfg, bool force = false) {
  return Pipeline(cfg, force).run();
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationCell {
  std::string label;
  AblationToggles toggles;
  double h = 1.0;
};

/// Labeled cells A-F followed by the h sweep with every component on.
inline std::vector<AblationCell> default_ablation_grid() {
  std::vector<AblationCell> g{
      {"A", {false, false, false}, 1.0},  // 1-rectified flow
      {"B", {false, false, true}, 1.0},   // 2-rectified flow
      {"C", {true, false, true}, 1.5},    // CAF without initial-velocity conditioning
      {"D", {true, true, true}, 1.0},
      {"E", {true, true, true}, 2.0},
      {"F", {true, true, true}, 1.5},
  };
  for (double h : {0.5, 1.0, 1.5, 2.0}) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "h=%.1f", h);
    g.push_back({buf, {true, true, true}, h});
  }
  return g;
}

struct AblationRow {
  AblationCell cell;
  std::string config_hash;
  std::string status = "ok";
  std::map<std::string, double> values;
};

inline constexpr const char* kAblationCsvHeader =
    "cell,acceleration_on,ivc_on,reflow_on,h,sliced_wasserstein,nfss,coupling_l2,coupling_psnr,config_hash,status";

inline std::string ablation_csv_row(const AblationRow& r) {
  auto val = [&](const char* k) {
    auto it = r.values.find(k);
    if (it == r.values.end()) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", it->second);
    return std::string(buf);
  };
  char h[32];
  std::snprintf(h, sizeof h, "%g", r.cell.h);
  std::string status = r.status;
  for (auto& c : status)
    if (c == ',' || c == '\n') c = ';';
  return r.cell.label + "," + std::to_string(r.cell.toggles.acceleration_on) + "," +
         std::to_string(r.cell.toggles.ivc_on) + "," + std::to_string(r.cell.toggles.reflow_on) + "," + h + "," +
         val("sliced_wasserstein") + "," + val("nfss") + "," + val("coupling_train_l2") + "," +
         val("coupling_train_psnr") + "," + r.config_hash + "," + status;
}

/// The base config with one cell's toggles applied; samplers run at N=1.
inline ExperimentConfig cell_config(const ExperimentConfig& base, const AblationCell& cell) {
  ExperimentConfig c = base;
  c.name = base.name + "/" + cell.label;
  c.ablation = cell.toggles;
  c.flow.h = cell.toggles.acceleration_on ? cell.h : 1.0;
  c.flow.n_steps = 1;
  return c;
}

/// Runs every cell (up to `jobs` at once), then appends one row per cell to
/// <output_dir>/ablation.csv in grid order. Failed cells are recorded and
/// the grid continues.
inline std::vector<AblationRow> run_ablation_grid(const ExperimentConfig& base, const std::vector<AblationCell>& grid,
                                                  int jobs = 1, bool force = false) {
  std::vector<AblationRow> rows(grid.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      auto& row = rows[i];
      row.cell = grid[i];
      const auto cfg = cell_config(base, grid[i]);
      row.config_hash = config_hash(cfg);
      try {
        const auto res = run_pipeline(cfg, force);
        for (const auto& m : res.metrics) row.values[m.name] = m.value;
      } catch (const std::exception& e) {
        row.status = std::string("failed: ") + e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(grid.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  const fs::path ledger = fs::path(base.output_dir) / "ablation.csv";
  FileLock lock(fs::path(base.output_dir) / "ablation.lock");
  const bool fresh = !fs::exists(ledger) || fs::file_size(ledger) == 0;
  std::ofstream out(ledger, std::ios::app);
  if (!out) throw Error("cannot append to " + ledger.string());
  if (fresh) out << kAblationCsvHeader << "\n";
  for (const auto& r : rows) out << ablation_csv_row(r) << "\n";
  return rows;
}

}  // namespace caf::cli

#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "caf/experiment.hpp"

using namespace caf;
using namespace caf::cli;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitPhase = 3;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> h;
  std::optional<int> steps;
  bool force = false;
  int jobs = 1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->set_help_flag("--help", "Print this help message and exit");
  sub->add_option("--config", c.config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Override the config seed");
  sub->add_option("--out", c.out, "Override the output directory");
  sub->add_option("--h", c.h, "Override the initial-velocity scale h");
  sub->add_option("--steps", c.steps, "Sampler steps N")->check(CLI::PositiveNumber);
  sub->add_flag("--force", c.force, "Recompute cached phases");
}

ExperimentConfig resolve(const Common& c) {
  auto cfg = load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.output_dir = *c.out;
  if (c.h) cfg.flow.h = *c.h;
  if (c.steps) cfg.flow.n_steps = *c.steps;
  cfg.validate();
  return cfg;
}

void write_matrix_csv(const fs::path& path, const Mat& m, const char* prefix) {
  std::ostringstream os;
  for (Eigen::Index i = 0; i < m.rows(); ++i) os << (i ? "," : "") << prefix << i;
  os << "\n";
  char buf[32];
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      os << (i ? "," : "") << buf;
    }
    os << "\n";
  }
  atomic_write(path, os.str());
}

void print_metrics(const std::vector<MetricReport>& ms, const std::string& hash) {
  std::cout << kMetricsCsvHeader << "\n";
  for (const auto& m : ms) std::cout << metric_csv_row(m, hash) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constant acceleration flow and rectified flow on toy data"};
  app.set_help_flag("--help", "Print this help message and exit");
  app.require_subcommand(1);
  Common c;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"train-rf", "Train 1-rectified flow on the base coupling"},
           {"reflow", "Build the deterministic coupling from the trained rectified flow"},
           {"train-caf", "Train the configured model (CAF or the rectified-flow baseline)"},
           {"sample", "Draw N-step samples from fresh source points"},
           {"invert", "Invert fresh target points and regenerate them"},
           {"metrics", "Evaluate metrics and write metrics.csv"},
           {"plot", "Render sampled trajectories to SVG"},
           {"ablate", "Run the ablation grid"},
           {"pipeline", "Run every phase"}}) {
    auto* s = app.add_subcommand(name, help);
    add_common(s, c);
    subs[name] = s;
  }
  subs["ablate"]->add_option("--jobs", c.jobs, "Cells evaluated in parallel")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    const auto cfg = resolve(c);
    if (subs["ablate"]->parsed()) {
      const auto rows = run_ablation_grid(cfg, default_ablation_grid(), c.jobs, c.force);
      std::cout << kAblationCsvHeader << "\n";
      bool failed = false;
      for (const auto& r : rows) {
        std::cout << ablation_csv_row(r) << "\n";
        failed = failed || r.status != "ok";
      }
      return failed ? kExitPhase : 0;
    }
    Pipeline p(cfg, c.force);
    p.write_config();
    if (subs["train-rf"]->parsed()) {
      p.rf1();
    } else if (subs["reflow"]->parsed()) {
      std::cout << "reflow coupling: " << p.reflow_coupling().size() << " pairs\n";
    } else if (subs["train-caf"]->parsed()) {
      std::cout << p.models().ids << "\n";
    } else if (subs["sample"]->parsed()) {
      const auto n = static_cast<std::size_t>(cfg.metrics.n_eval);
      const auto path = p.dir() / "trajectories" / ("samples_N" + std::to_string(cfg.flow.n_steps) + ".csv");
      p.run_phase("sample", path, [&] { write_matrix_csv(path, p.sample(p.fresh_sources(n), cfg.flow.n_steps), "x_"); });
    } else if (subs["invert"]->parsed()) {
      const auto n = static_cast<std::size_t>(cfg.metrics.n_eval);
      const auto path = p.dir() / "trajectories" / ("reconstruction_N" + std::to_string(cfg.flow.n_steps) + ".csv");
      p.run_phase("invert", path, [&] {
        const auto r = p.reconstruct_points(p.fresh_targets(n, 64), cfg.flow.n_steps);
        write_matrix_csv(path, r.endpoints, "x_");
        std::printf("mean round-trip error %.6g over %zu points\n", r.mean_error, n);
      });
    } else if (subs["metrics"]->parsed()) {
      std::vector<MetricReport> ms;
      p.run_phase("metrics", p.dir() / "metrics.csv", [&] {
        ms = p.evaluate();
        p.write_metrics(ms);
      });
      print_metrics(ms, p.hash());
    } else if (subs["plot"]->parsed()) {
      p.run_phase("plot", p.dir() / "plots" / "trajectories.svg", [&] { p.plot(); });
    } else if (subs["pipeline"]->parsed()) {
      const auto r = p.run();
      print_metrics(r.metrics, r.hash);
    }
    std::cerr << "output: " << p.dir().string() << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const PhaseError& e) {
    std::cerr << e.what() << "\n";
    return kExitPhase;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPhase;
  }
}

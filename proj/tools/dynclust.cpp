// Command-line front end: fit a clustering model to a CSV panel, or generate
// the bundled synthetic benchmark panels.

#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <thread>

#include "dynclust/io.hpp"
#include "dynclust/panel.hpp"
#include "dynclust/parallel.hpp"
#include "dynclust/runner.hpp"
#include "dynclust/synthetic.hpp"

namespace {

int run_fit(const std::string& config_path, const std::string& data_path,
            const std::string& out_dir, int threads) {
  dynclust::set_max_threads(threads);
  const dynclust::RunConfig raw = dynclust::parse_config(config_path);
  const dynclust::TimeSeriesPanel panel = dynclust::load_panel(data_path);
  std::cout << "loaded panel: n=" << panel.n() << " T=" << panel.T() << " m=" << panel.m()
            << "\n";
  const dynclust::RunConfig cfg = dynclust::resolve_config(raw, panel);
  const dynclust::EstimationResult result = dynclust::run(cfg, panel);
  const auto files = dynclust::emit_results(result, panel, cfg, out_dir);
  std::cout << "algorithm " << result.algorithm << " finished in " << result.iterations_run
            << " iterations (" << result.wall_seconds << " s)\n";
  for (const auto& f : files) std::cout << "wrote " << f << "\n";
  return 0;
}

int run_generate(const std::string& kind, std::uint64_t seed, const std::string& out_path,
                 const std::string& truth_path) {
  dynclust::SyntheticKind k;
  if (kind == "static") {
    k = dynclust::SyntheticKind::Static;
  } else if (kind == "dynamic") {
    k = dynclust::SyntheticKind::Dynamic;
  } else {
    throw dynclust::ConfigError("--kind must be 'static' or 'dynamic'");
  }
  const dynclust::SyntheticPanel generated = dynclust::generate_synthetic(k, seed);
  dynclust::save_panel(generated.panel, out_path);
  std::cout << "wrote " << out_path << " (n=" << generated.panel.n()
            << " T=" << generated.panel.T() << ")\n";
  if (!truth_path.empty()) {
    std::ofstream out(truth_path);
    if (!out) throw dynclust::DataError("cannot open '" + truth_path + "' for writing");
    out << "series_id,initial_cluster,switch_time\n";
    for (int i = 0; i < generated.panel.n(); ++i) {
      const int sw = generated.switch_times[static_cast<std::size_t>(i)];
      out << generated.panel.ids[static_cast<std::size_t>(i)] << ','
          << (generated.labels[static_cast<std::size_t>(i)] + 1) << ','
          << (sw < 0 ? std::string("none") : std::to_string(sw + 1)) << '\n';
    }
    std::cout << "wrote " << truth_path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-series panel clustering with mixtures of dynamic linear models"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_dir;
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  auto* fit = app.add_subcommand("fit", "Fit a model to a CSV panel");
  fit->add_option("--config", config_path, "Run configuration file")->required();
  fit->add_option("--data", data_path, "Panel CSV (series_id,time_index,values...)")->required();
  fit->add_option("--out", out_dir, "Output directory")->required();
  fit->add_option("--threads", threads, "Maximum worker threads");

  std::string kind, gen_out, truth_out;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic benchmark panel");
  gen->add_option("--kind", kind, "static | dynamic")->required();
  gen->add_option("--seed", seed, "Generator seed")->required();
  gen->add_option("--out", gen_out, "Output CSV path")->required();
  gen->add_option("--truth", truth_out, "Optional ground-truth CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (*fit) return run_fit(config_path, data_path, out_dir, threads);
    return run_generate(kind, seed, gen_out, truth_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return dynclust::exit_code_for(e);
  }
}

// Command-line front end for the swarm simulator, the parameter sweeps, and
// the analytic inter-AS traffic estimator.
//
//   localswarm run <file>       [--out d] [--seed n] [--trace] [--json]
//   localswarm sweep <file>     [--out d] [--seed n] [--threads n] [--json]
//   localswarm estimate --profiles <f> --savings <f>  [--out d] [--json]
//
// Exit codes: 0 success, 2 invalid input, 3 run aborted without progress,
// 4 sweep finished but some cells failed.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>

#include "localswarm/runner.hpp"

int main(int argc, char** argv) {
  using namespace localswarm;

  CLI::App app{"Fluid-flow swarm simulator and inter-ISP traffic estimator"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string out_dir = ".";
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool trace = false;
  bool json = false;
  app.add_option("--out", out_dir, "Directory for report files (default: current directory)");
  CLI::Option* seed_opt =
      app.add_option("--seed", seed, "Override the scenario file's RNG seed");
  app.add_option("--threads", threads,
                 "Worker threads for sweep cells (single runs stay single-threaded)");
  app.add_flag("--trace", trace, "Also write a <run>.trace.txt event/transfer dump");
  app.add_flag("--json", json, "Also write JSON mirrors of the CSV tables");

  CLI::App* run_cmd =
      app.add_subcommand("run", "Simulate one scenario file and write its per-ISP metrics table");
  std::string run_path;
  run_cmd->add_option("file", run_path, "Scenario file (key = value lines)")->required();

  CLI::App* sweep_cmd = app.add_subcommand(
      "sweep", "Run a parameter sweep described by a scenario file with sweep_* keys");
  std::string sweep_path;
  sweep_cmd->add_option("file", sweep_path, "Scenario file with sweep_axis/sweep_values")
      ->required();

  CLI::App* est_cmd = app.add_subcommand(
      "estimate", "Apply the analytic traffic model to crawl-derived torrent profiles");
  std::string profiles_path;
  std::string savings_path;
  est_cmd->add_option("--profiles", profiles_path, "Profiles CSV (torrent_id,as_id,peer_count,content_bytes)")
      ->required();
  est_cmd->add_option("--savings", savings_path, "Savings CSV (as_size,saving)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_validation;  // --help exits 0; usage errors are input errors
  }

  RunOptions opt;
  opt.out_dir = out_dir;
  opt.json = json;
  opt.trace = trace;
  if (seed_opt->count() > 0) opt.seed_override = seed;

  std::string context;
  try {
    if (*run_cmd) {
      context = run_path;
      RunArtifacts a = run_scenario_file(run_path, opt);
      for (const auto& f : a.files) std::printf("wrote %s\n", f.string().c_str());
      if (a.result.aborted)
        std::fprintf(stderr, "%s: run aborted: %s\n", run_path.c_str(),
                     a.result.abort_reason.c_str());
      return a.exit_code;
    }
    if (*sweep_cmd) {
      context = sweep_path;
      SweepArtifacts a = run_sweep_file(sweep_path, opt, threads);
      for (const auto& f : a.files) std::printf("wrote %s\n", f.string().c_str());
      std::size_t failed = 0;
      for (const SweepCell& cell : a.cells)
        if (cell.failed) ++failed;
      if (failed > 0)
        std::fprintf(stderr, "%s: %zu of %zu sweep cells failed (see # cell lines)\n",
                     sweep_path.c_str(), failed, a.cells.size());
      return a.exit_code;
    }
    context = profiles_path + ", " + savings_path;
    EstimateArtifacts a = run_estimate_files(profiles_path, savings_path, opt);
    for (const auto& f : a.files) std::printf("wrote %s\n", f.string().c_str());
    return a.exit_code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s: %s\n", context.c_str(), e.what());
    return exit_validation;
  }
}

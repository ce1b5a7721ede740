// Runner and report-file tests: scenario files in, CSV/JSON tables out,
// sweep grids with per-cell failure tolerance, analytic-estimate reports,
// and the command-line tool's exit codes.

#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "localswarm/runner.hpp"

using namespace localswarm;
namespace fs = std::filesystem;

namespace {

// Fresh per-tag scratch directory under the system temp dir.
fs::path scratch(const std::string& tag) {
  fs::path d = fs::temp_directory_path() / ("localswarm_runner_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

const char* kSmallScenario =
    "peers = 12\n"
    "isps = 3\n"
    "content = 2500000\n"
    "piece = 250000\n"
    "seed_rate = 20000\n"
    "upload = 20000\n"
    "policy = locality\n"
    "limit = 2\n"
    "rr = on\n"
    "pm = on\n"
    "seed = 11\n"
    "arrival_window = 30\n"
    "seed_linger = 60\n";

// A swarm whose ISP 1 is cut off before anyone has a piece, with partition
// merging disabled: every run of it stall-aborts.
const char* kDoomedScenario =
    "peers = 6\n"
    "isps = 2\n"
    "content = 1000000\n"
    "piece = 250000\n"
    "seed_rate = 20000\n"
    "upload = 20000\n"
    "policy = locality\n"
    "limit = 2\n"
    "rr = on\n"
    "pm = off\n"
    "partition_isp = 1\n"
    "partition_time = 1\n"
    "arrival_window = 10\n"
    "seed_linger = 30\n"
    "stall_window = 300\n"
    "seed = 3\n";

fs::path write_text(const fs::path& dir, const std::string& name, const std::string& text) {
  fs::path p = dir / name;
  std::ofstream out(p, std::ios::binary);
  out << text;
  return p;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  return lines;
}

}  // namespace

TEST_CASE("a scenario file runs to a metrics table with a manifest header") {
  const fs::path dir = scratch("run");
  const fs::path scn = write_text(dir, "quick.scn", kSmallScenario);

  RunOptions opt;
  opt.out_dir = dir / "out";
  RunArtifacts a = run_scenario_file(scn, opt);

  CHECK(a.exit_code == exit_ok);
  CHECK_FALSE(a.result.aborted);
  REQUIRE(a.files.size() == 1);
  CHECK(a.files[0].filename() == "quick.metrics.csv");
  REQUIRE(fs::exists(a.files[0]));
  CHECK(read_file(a.files[0]) == a.metrics_text);

  const std::vector<std::string> lines = lines_of(a.metrics_text);
  REQUIRE(lines.size() == 2 + 3 + 1);  // manifest, header, three ISPs, mean
  CHECK(lines[0].rfind("#manifest format=1 config=", 0) == 0);
  CHECK(lines[0].find(" seed=11") != std::string::npos);
  CHECK(lines[1] == std::string(kMetricsCsvColumns));
  for (int isp = 0; isp < 3; ++isp) {
    CAPTURE(isp, lines[2 + isp]);
    CHECK(lines[2 + isp].rfind(std::to_string(isp) + ",4,", 0) == 0);  // 4 peers per ISP
  }
  CHECK(lines[5].rfind("mean,12,", 0) == 0);

  // Every leecher finished and each ISP row carries slowdown stats.
  CHECK(a.result.completions.size() == 12);
  for (const IspMetricsRow& row : a.report.rows) {
    CHECK(row.completed == 4);
    CHECK(row.slowdown_mean >= 1.0);
  }
}

TEST_CASE("rerunning a file is byte-identical and a seed override changes the manifest") {
  const fs::path dir = scratch("determinism");
  const fs::path scn = write_text(dir, "quick.scn", kSmallScenario);

  RunOptions opt1;
  opt1.out_dir = dir / "a";
  RunOptions opt2;
  opt2.out_dir = dir / "b";
  RunArtifacts first = run_scenario_file(scn, opt1);
  RunArtifacts second = run_scenario_file(scn, opt2);
  CHECK(first.manifest == second.manifest);
  CHECK(first.metrics_text == second.metrics_text);
  CHECK(read_file(first.files[0]) == read_file(second.files[0]));

  RunOptions opt3;
  opt3.out_dir = dir / "c";
  opt3.seed_override = 99;
  RunArtifacts overridden = run_scenario_file(scn, opt3);
  CHECK(overridden.manifest != first.manifest);
  CHECK(overridden.manifest.find(" seed=99") != std::string::npos);

  // The override is exactly equivalent to writing the seed into the file.
  const fs::path scn99 =
      write_text(dir, "quick99.scn",
                 std::string(kSmallScenario) + "seed = 99\n");  // later key wins
  RunOptions opt4;
  opt4.out_dir = dir / "d";
  RunArtifacts inline99 = run_scenario_file(scn99, opt4);
  CHECK(inline99.manifest == overridden.manifest);
  CHECK(inline99.metrics_text == overridden.metrics_text);
}

TEST_CASE("trace and JSON mirrors are written on demand") {
  const fs::path dir = scratch("mirrors");
  const fs::path scn = write_text(dir, "quick.scn", kSmallScenario);

  RunOptions opt;
  opt.out_dir = dir / "out";
  opt.json = true;
  opt.trace = true;
  RunArtifacts a = run_scenario_file(scn, opt);
  REQUIRE(a.files.size() == 3);
  CHECK(a.files[1].filename() == "quick.metrics.json");
  CHECK(a.files[2].filename() == "quick.trace.txt");

  const nlohmann::json j = nlohmann::json::parse(read_file(a.files[1]));
  CHECK(j.at("aborted") == false);
  CHECK(j.at("completions") == 12);
  REQUIRE(j.at("metrics").at("rows").size() == 3);
  CHECK(j.at("metrics").at("rows")[0].at("peers") == 4);
  CHECK(j.at("stats").at("pieces_completed") == 12 * 10);

  const std::string trace = read_file(a.files[2]);
  CHECK(trace.find("completions=12") != std::string::npos);
  CHECK(trace.find("# transfers: time src_peer dst_peer bytes") != std::string::npos);
  CHECK(trace.find(a.manifest) == 0);
}

TEST_CASE("a run that stalls still writes its table and reports the abort") {
  const fs::path dir = scratch("stall");
  const fs::path scn = write_text(dir, "doomed.scn", kDoomedScenario);

  RunOptions opt;
  opt.out_dir = dir / "out";
  RunArtifacts a = run_scenario_file(scn, opt);
  CHECK(a.exit_code == exit_stalled);
  CHECK(a.result.aborted);
  REQUIRE(fs::exists(a.files[0]));
  const std::vector<std::string> lines = lines_of(a.metrics_text);
  CHECK(lines[0].rfind("#manifest ", 0) == 0);
  CHECK(lines[1].rfind("#aborted ", 0) == 0);
  CHECK(lines[1].find("no transfer progress") != std::string::npos);
  CHECK(lines[2] == std::string(kMetricsCsvColumns));
}

TEST_CASE("scenario parse errors carry the offending line number") {
  const fs::path dir = scratch("badfile");
  const fs::path scn = write_text(dir, "typo.scn", "peers = 12\nisps = 3\nlimt = 2\n");
  try {
    run_scenario_file(scn, {});
    FAIL("expected config_error");
  } catch (const config_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("limt") != std::string::npos);
  }
}

TEST_CASE("sweep files parse plain values, ranges and repetitions") {
  const std::string text = std::string(kSmallScenario) +
                           "sweep_axis = limit\n"
                           "sweep_values = 1:2:1, 4\n"
                           "sweep_reps = 2\n";
  const SweepSpec spec = parse_sweep(text);
  CHECK(spec.axis == SweepAxis::connection_limit);
  CHECK(spec.repetitions == 2);
  REQUIRE(spec.values == std::vector<double>{1.0, 2.0, 4.0});
  CHECK(spec.base.torrent_size == 12);

  CHECK_THROWS_AS(parse_sweep(std::string(kSmallScenario) + "sweep_values = 1,2\n"),
                  config_error);  // no axis
  CHECK_THROWS_AS(parse_sweep(std::string(kSmallScenario) + "sweep_axis = bandwidth\n"),
                  config_error);  // unknown axis
  CHECK_THROWS_AS(parse_sweep(std::string(kSmallScenario) +
                              "sweep_axis = limit\nsweep_values = 2\nsweep_reps = 0\n"),
                  config_error);  // zero repetitions
  CHECK_THROWS_AS(parse_sweep(std::string(kSmallScenario) +
                              "sweep_axis = peers\nsweep_values = 14\n"),
                  config_error);  // 14 peers do not divide into 3 ISPs
  CHECK_THROWS_AS(parse_sweep(std::string(kSmallScenario) +
                              "sweep_axis = limit\nsweep_values = 2.5\n"),
                  config_error);  // fractional connection cap
  CHECK_THROWS_AS(parse_sweep("peers = 12\nisps = 3\npolicy = random\n"
                              "sweep_axis = limit\nsweep_values = 2\n"),
                  config_error);  // limit sweep without the locality policy
}

TEST_CASE("repetition 0 keeps the base seed and later repetitions are distinct") {
  CHECK(rep_seed(11, 0) == 11);
  std::set<std::uint64_t> seen;
  for (std::uint32_t rep = 0; rep < 16; ++rep) seen.insert(rep_seed(11, rep));
  CHECK(seen.size() == 16);

  SweepSpec spec;
  spec.base = parse_scenario(kSmallScenario);
  spec.axis = SweepAxis::connection_limit;
  spec.values = {1.0, 3.0};
  spec.repetitions = 2;
  const ScenarioConfig cell = cell_config(spec, 1, 1);
  CHECK(cell.policy.limit == 3);
  CHECK(cell.rng_seed == rep_seed(11, 1));
  CHECK(cell_config(spec, 1, 0).rng_seed == 11);
}

TEST_CASE("axis application rewrites the right fields") {
  const ScenarioConfig base = parse_scenario(kSmallScenario);

  const ScenarioConfig sized = axis_applied(base, SweepAxis::torrent_size, 24);
  CHECK(sized.torrent_size == 24);
  CHECK(sized.isp_counts == std::vector<std::uint32_t>{8, 8, 8});

  const ScenarioConfig per = axis_applied(base, SweepAxis::peers_per_isp, 5);
  CHECK(per.torrent_size == 15);
  CHECK(per.isp_counts == std::vector<std::uint32_t>{5, 5, 5});

  const ScenarioConfig capped = axis_applied(base, SweepAxis::egress_capacity, 2500.5);
  REQUIRE(capped.egress_cap.has_value());
  CHECK(*capped.egress_cap == 2500.5);

  CHECK_THROWS_AS(axis_applied(base, SweepAxis::egress_capacity, 0.0), config_error);
}

TEST_CASE("a sweep table is the row-wise union of its single runs") {
  SweepSpec spec = parse_sweep(std::string(kSmallScenario) +
                               "sweep_axis = limit\nsweep_values = 1,2\nsweep_reps = 2\n");
  const SweepArtifacts a = run_sweep(spec);
  CHECK(a.exit_code == exit_ok);
  REQUIRE(a.cells.size() == 4);
  for (const SweepCell& cell : a.cells) CHECK_FALSE(cell.failed);

  const std::vector<std::string> lines = lines_of(a.csv);
  CHECK(lines[0].rfind("#manifest ", 0) == 0);
  CHECK(lines[0].find(" axis=limit values=2 reps=2") != std::string::npos);
  CHECK(lines[1] == "axis_value,rep," + std::string(kMetricsCsvColumns));
  // 2 values x (2 reps x (3 ISP rows + mean row) + value summary) = 18 data lines.
  REQUIRE(lines.size() == 2 + 2 * (2 * 4 + 1));

  // Re-run one cell standalone: its rows must appear verbatim, prefixed.
  const RunArtifacts single = run_scenario(cell_config(spec, 1, 1));
  for (const IspMetricsRow& row : single.report.rows) {
    const std::string expect = "2,1," + metrics_csv_row(row);
    CAPTURE(expect);
    CHECK(a.csv.find(expect + "\n") != std::string::npos);
  }
  CHECK(a.csv.find("2,1," + metrics_csv_mean_row(single.report) + "\n") != std::string::npos);

  // Per-value summary rows exist for both values.
  CHECK(a.csv.find("\n1,mean,mean,12,") != std::string::npos);
  CHECK(a.csv.find("\n2,mean,mean,12,") != std::string::npos);

  // The cell grid is thread-count independent.
  const SweepArtifacts threaded = run_sweep(spec, 3);
  CHECK(threaded.csv == a.csv);
}

TEST_CASE("failed sweep cells become comment lines and the sweep continues") {
  const fs::path dir = scratch("sweepfail");
  const fs::path scn = write_text(dir, "doomed_sweep.scn",
                                  std::string(kDoomedScenario) +
                                      "sweep_axis = limit\nsweep_values = 1,2\n");
  RunOptions opt;
  opt.out_dir = dir / "out";
  const SweepArtifacts a = run_sweep_file(scn, opt);
  CHECK(a.exit_code == exit_partial_sweep);
  REQUIRE(a.cells.size() == 2);
  CHECK(a.cells[0].failed);
  CHECK(a.cells[1].failed);
  CHECK(a.cells[0].error.find("no transfer progress") != std::string::npos);

  const std::vector<std::string> lines = lines_of(a.csv);
  REQUIRE(lines.size() == 4);  // manifest, header, two failure comments
  CHECK(lines[2].rfind("# cell axis_value=1 rep=0 failed:", 0) == 0);
  CHECK(lines[3].rfind("# cell axis_value=2 rep=0 failed:", 0) == 0);
  CHECK(fs::exists(a.files[0]));
}

TEST_CASE("a programmatic sweep records invalid cells without killing the rest") {
  SweepSpec spec;
  spec.base = parse_scenario(kSmallScenario);
  spec.axis = SweepAxis::torrent_size;
  spec.values = {12.0, 14.0};  // 14 does not divide into 3 ISPs
  spec.repetitions = 1;
  const SweepArtifacts a = run_sweep(spec);
  CHECK(a.exit_code == exit_partial_sweep);
  REQUIRE(a.cells.size() == 2);
  CHECK_FALSE(a.cells[0].failed);
  CHECK(a.cells[1].failed);
  CHECK(a.cells[1].error.find("not divisible") != std::string::npos);
  CHECK(a.csv.find("\n12,0,0,") != std::string::npos);
  CHECK(a.csv.find("# cell axis_value=14 rep=0 failed:") != std::string::npos);
}

TEST_CASE("estimate: hand-checked model rows, curves and totals") {
  // alpha: 4 peers over two ASes, 1000-byte content. Border upload under the
  // random policy is (1 - S_A/S_T) * S_A * C: AS1 1*(3/4)*1000 = 750, AS2
  // 3*(1/4)*1000 = 750. The savings table removes 40% for ASes up to 5 peers
  // (one-peer ASes always save nothing). The one-copy ideal charges content
  // size per AS except the seed's AS (the largest, AS2). beta: a single AS
  // holds every peer, so nothing ever crosses its border.
  const std::string profiles =
      "torrent_id,as_id,peer_count,content_bytes\n"
      "alpha,AS1,1,1000\n"
      "alpha,AS2,3,1000\n"
      "beta,AS9,2,500\n";
  const std::string savings = "as_size,saving\n5,0.4\n";

  const EstimateArtifacts a = run_estimate(profiles, savings);
  CHECK(a.exit_code == exit_ok);

  const std::vector<std::string> rows = lines_of(a.rows_csv);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].rfind("#manifest format=1 profiles=", 0) == 0);
  CHECK(rows[1] == "torrent_id,as_id,S_A,random_bytes,locality_bytes,ideal_bytes");
  CHECK(rows[2] == "alpha,AS1,1,750,750,1000");
  CHECK(rows[3] == "alpha,AS2,3,750,450,0");
  CHECK(rows[4] == "beta,AS9,2,0,0,0");

  const std::vector<std::string> torrents = lines_of(a.torrents_csv);
  REQUIRE(torrents.size() == 5);
  CHECK(torrents[1] ==
        "torrent_id,random_bytes,locality_bytes,ideal_bytes,cum_random_bytes,"
        "cum_locality_bytes,cum_ideal_bytes");
  CHECK(torrents[2] == "alpha,1500,1200,1000,1500,1200,1000");
  CHECK(torrents[3] == "beta,0,0,0,1500,1200,1000");
  CHECK(torrents[4] == "total,1500,1200,1000,,,");

  const std::vector<std::string> ases = lines_of(a.as_csv);
  REQUIRE(ases.size() == 6);
  CHECK(ases[2] == "AS1,750,750,1000,750,750,1000");
  CHECK(ases[3] == "AS2,750,450,0,1500,1200,1000");
  CHECK(ases[4] == "AS9,0,0,0,1500,1200,1000");
  CHECK(ases[5] == "total,1500,1200,1000,,,");

  // An empty savings table leaves the locality column equal to the random one.
  const EstimateArtifacts plain = run_estimate(profiles, "");
  for (const EstimateRow& row : plain.report.rows) CHECK(row.locality_bytes == row.random_bytes);
}

TEST_CASE("estimate files land together and share one manifest") {
  const fs::path dir = scratch("estimate");
  const fs::path profiles = write_text(dir, "profiles.csv",
                                       "torrent_id,as_id,peer_count,content_bytes\n"
                                       "alpha,AS1,1,1000\n"
                                       "alpha,AS2,3,1000\n");
  const fs::path savings = write_text(dir, "savings.csv", "as_size,saving\n5,0.4\n");

  RunOptions opt;
  opt.out_dir = dir / "out";
  opt.json = true;
  EstimateArtifacts a = run_estimate_files(profiles, savings, opt);
  CHECK(a.exit_code == exit_ok);
  REQUIRE(a.files.size() == 4);
  CHECK(a.files[0].filename() == "estimate.csv");
  CHECK(a.files[1].filename() == "estimate.torrents.csv");
  CHECK(a.files[2].filename() == "estimate.as.csv");
  CHECK(a.files[3].filename() == "estimate.json");
  const std::string manifest = lines_of(read_file(a.files[0]))[0];
  CHECK(lines_of(read_file(a.files[1]))[0] == manifest);
  CHECK(lines_of(read_file(a.files[2]))[0] == manifest);

  const nlohmann::json j = nlohmann::json::parse(read_file(a.files[3]));
  CHECK(j.at("totals").at("random_bytes") == "1500");
  REQUIRE(j.at("rows").size() == 2);
  CHECK(j.at("rows")[1].at("locality_bytes") == 450);

  // Bad schema: rejected with the row number.
  const fs::path bad = write_text(dir, "bad.csv", "alpha,AS1,1\n");
  try {
    run_estimate_files(bad, savings, opt);
    FAIL("expected config_error");
  } catch (const config_error& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
}

TEST_CASE("the shipped example scenarios parse and the quickstart completes") {
  const char* dir = std::getenv("LOCALSWARM_SCENARIOS");
  REQUIRE(dir != nullptr);
  for (const char* name : {"quickstart.scn", "random_baseline.scn", "egress_squeeze.scn",
                           "partition_rescue.scn"}) {
    CAPTURE(name);
    CHECK_NOTHROW(parse_scenario(read_file(fs::path(dir) / name)));
  }
  CHECK_NOTHROW(parse_sweep(read_file(fs::path(dir) / "limit_sweep.scn")));
  CHECK_NOTHROW(parse_profiles_csv(read_file(fs::path(dir) / "profiles_example.csv")));
  CHECK_NOTHROW(parse_savings_csv(read_file(fs::path(dir) / "savings_example.csv")));

  const RunArtifacts a = run_scenario(parse_scenario(read_file(fs::path(dir) / "quickstart.scn")));
  CHECK(a.exit_code == exit_ok);
  CHECK(a.result.completions.size() == 12);
}

TEST_CASE("the command-line tool maps outcomes to exit codes") {
  const char* bin = std::getenv("LOCALSWARM_BIN");
  REQUIRE(bin != nullptr);
  const fs::path dir = scratch("cli");
  const fs::path scn = write_text(dir, "quick.scn", kSmallScenario);
  const fs::path doomed = write_text(dir, "doomed.scn", kDoomedScenario);
  const fs::path sweep = write_text(dir, "grid.scn",
                                    std::string(kDoomedScenario) +
                                        "sweep_axis = limit\nsweep_values = 1,2\n");
  const fs::path profiles = write_text(dir, "profiles.csv", "t,A,2,100\nt,B,2,100\n");
  const fs::path savings = write_text(dir, "savings.csv", "");

  const auto run_tool = [&](const std::string& args) {
    const std::string cmd = std::string(bin) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
  };

  const std::string out = " --out " + (dir / "out").string();
  CHECK(run_tool("run " + scn.string() + out) == 0);
  CHECK(fs::exists(dir / "out" / "quick.metrics.csv"));
  CHECK(run_tool("run " + scn.string() + out + " --seed 42 --json --trace") == 0);
  CHECK(fs::exists(dir / "out" / "quick.trace.txt"));
  CHECK(run_tool("run " + (dir / "missing.scn").string() + out) == 2);
  CHECK(run_tool("run " + doomed.string() + out) == 3);
  CHECK(run_tool("sweep " + sweep.string() + out + " --threads 2") == 4);
  CHECK(fs::exists(dir / "out" / "grid.sweep.csv"));
  CHECK(run_tool("estimate --profiles " + profiles.string() + " --savings " + savings.string() +
                 out) == 0);
  CHECK(fs::exists(dir / "out" / "estimate.csv"));
  CHECK(run_tool("frobnicate") == 2);
  CHECK(run_tool("--help") == 0);
}

#pragma once

// Experiment runner: turns scenario files into report files.
//
// Three entry points, mirrored by the command-line tool:
//   * run_scenario    — one simulation, one per-ISP metrics table.
//   * run_sweep       — vary one parameter over a value grid, with repeated
//                       independently seeded runs per value; failures are
//                       recorded per cell and the sweep keeps going.
//   * run_estimate    — apply the analytic traffic model to crawl-derived
//                       torrent profiles and a locality-savings table.
//
// Every CSV starts with a `#manifest` comment line carrying a hash of the
// exact configuration and the seed, so "same config" is checkable at a
// glance and reruns can be diffed byte for byte. JSON mirrors of each table
// are written when asked for. Files are written atomically (write + rename).

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "localswarm/estimator.hpp"
#include "localswarm/io_util.hpp"
#include "localswarm/metrics.hpp"
#include "localswarm/scenario.hpp"
#include "localswarm/swarm.hpp"

namespace localswarm {

// Process exit codes shared by the library entry points and the tool.
enum ExitCode : int {
  exit_ok = 0,
  exit_validation = 2,     // bad scenario/sweep/estimate input
  exit_stalled = 3,        // the run aborted (no transfer progress)
  exit_partial_sweep = 4,  // some sweep cells failed; the rest completed
};

struct RunOptions {
  std::filesystem::path out_dir = ".";
  std::string stem;                            // output base name; file stem when empty
  std::optional<std::uint64_t> seed_override;  // replaces the file's seed
  bool json = false;                           // also write JSON mirrors
  bool trace = false;                          // also write a transfer-log dump
};

// ---------------------------------------------------------------------------
// Single runs.

inline MetricsParams metrics_params_for(const ScenarioConfig& cfg, const RunResult& result) {
  MetricsParams p;
  p.content_size = cfg.content_size;
  p.n_isps = static_cast<int>(cfg.n_isps());
  p.pseudo_isp = static_cast<int>(cfg.pseudo_isp());
  p.mean_max_upload = result.mean_max_upload;
  return p;
}

inline std::string run_manifest(const ScenarioConfig& cfg) {
  return "#manifest format=1 config=" + hex64(fnv1a64(cfg.canonical())) +
         " seed=" + std::to_string(cfg.rng_seed);
}

struct RunArtifacts {
  int exit_code = exit_ok;
  ScenarioConfig cfg;  // effective config, after any seed override
  RunResult result;
  MetricsReport report;
  std::string manifest;
  std::string metrics_text;                   // the CSV exactly as written
  std::vector<std::filesystem::path> files;   // written files, in order
};

// Compute-only core: simulate, aggregate, serialize. No file output.
inline RunArtifacts run_scenario(const ScenarioConfig& cfg) {
  RunArtifacts a;
  a.cfg = cfg;
  a.result = SwarmSim::run(cfg);
  a.report = report(a.result.ledger, a.result.completions, metrics_params_for(cfg, a.result));
  a.manifest = run_manifest(cfg);
  std::string header = a.manifest;
  if (a.result.aborted) header += "\n#aborted " + a.result.abort_reason;
  a.metrics_text = metrics_csv(a.report, header);
  a.exit_code = a.result.aborted ? exit_stalled : exit_ok;
  return a;
}

namespace detail {

inline nlohmann::ordered_json metrics_row_json(const IspMetricsRow& row) {
  return {{"isp", row.isp},
          {"peers", row.peers},
          {"overhead", row.overhead},
          {"p95_bytes", row.p95_bytes},
          {"completed", row.completed},
          {"slowdown_mean", row.slowdown_mean},
          {"slowdown_min", row.slowdown_min},
          {"slowdown_max", row.slowdown_max}};
}

inline nlohmann::ordered_json metrics_report_json(const MetricsReport& rep) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const IspMetricsRow& row : rep.rows) rows.push_back(metrics_row_json(row));
  return {{"rows", std::move(rows)},
          {"mean",
           {{"peers", rep.total_peers},
            {"overhead", rep.mean_overhead},
            {"p95_bytes", rep.mean_p95},
            {"completed", rep.total_completed},
            {"slowdown_mean", rep.slowdown_mean},
            {"slowdown_min", rep.slowdown_min},
            {"slowdown_max", rep.slowdown_max}}}};
}

inline nlohmann::ordered_json run_stats_json(const RunStats& s) {
  return {{"announces", s.announces},
          {"external_grants", s.external_grants},
          {"externals_connected", s.externals_connected},
          {"pm_requests", s.pm_requests},
          {"pm_grants", s.pm_grants},
          {"evictions", s.evictions},
          {"refused_connects", s.refused_connects},
          {"pieces_completed", s.pieces_completed},
          {"events_processed", s.events_processed}};
}

inline std::string run_json(const RunArtifacts& a) {
  nlohmann::ordered_json j;
  j["manifest"] = {{"format", 1},
                   {"config", hex64(fnv1a64(a.cfg.canonical()))},
                   {"seed", a.cfg.rng_seed}};
  j["aborted"] = a.result.aborted;
  if (a.result.aborted) j["abort_reason"] = a.result.abort_reason;
  j["end_time"] = a.result.end_time;
  j["completions"] = a.result.completions.size();
  j["metrics"] = metrics_report_json(a.report);
  j["stats"] = run_stats_json(a.result.stats);
  return j.dump(2) + "\n";
}

// Debug dump: run counters followed by the completed-transfer log.
inline std::string run_trace(const RunArtifacts& a) {
  std::string out = a.manifest + "\n";
  out += "end_time=" + fmt_fixed(a.result.end_time) + "\n";
  out += "aborted=" + std::string(a.result.aborted ? "1" : "0") + "\n";
  if (a.result.aborted) out += "abort_reason=" + a.result.abort_reason + "\n";
  out += "completions=" + std::to_string(a.result.completions.size()) + "\n";
  const RunStats& s = a.result.stats;
  out += "events_processed=" + std::to_string(s.events_processed) + "\n";
  out += "announces=" + std::to_string(s.announces) + "\n";
  out += "external_grants=" + std::to_string(s.external_grants) + "\n";
  out += "externals_connected=" + std::to_string(s.externals_connected) + "\n";
  out += "pm_requests=" + std::to_string(s.pm_requests) + "\n";
  out += "pm_grants=" + std::to_string(s.pm_grants) + "\n";
  out += "evictions=" + std::to_string(s.evictions) + "\n";
  out += "refused_connects=" + std::to_string(s.refused_connects) + "\n";
  out += "pieces_completed=" + std::to_string(s.pieces_completed) + "\n";
  out += "# transfers: time src_peer dst_peer bytes (time-sorted)\n";
  out += a.result.ledger.canonical();
  return out;
}

}  // namespace detail

// Write the single-run report files next to each other under opt.out_dir.
inline void write_run_outputs(RunArtifacts& a, const RunOptions& opt) {
  const std::string stem = opt.stem.empty() ? "run" : opt.stem;
  const std::filesystem::path base = opt.out_dir / stem;
  std::filesystem::path csv = base;
  csv += ".metrics.csv";
  write_file_atomic(csv, a.metrics_text);
  a.files.push_back(csv);
  if (opt.json) {
    std::filesystem::path jp = base;
    jp += ".metrics.json";
    write_file_atomic(jp, detail::run_json(a));
    a.files.push_back(jp);
  }
  if (opt.trace) {
    std::filesystem::path tp = base;
    tp += ".trace.txt";
    write_file_atomic(tp, detail::run_trace(a));
    a.files.push_back(tp);
  }
}

inline RunArtifacts run_scenario_file(const std::filesystem::path& path, RunOptions opt = {}) {
  ScenarioConfig cfg = parse_scenario(read_file(path));
  if (opt.seed_override) cfg.rng_seed = *opt.seed_override;
  if (opt.stem.empty()) opt.stem = path.stem().string();
  RunArtifacts a = run_scenario(cfg);
  write_run_outputs(a, opt);
  return a;
}

// ---------------------------------------------------------------------------
// Sweeps.

enum class SweepAxis : int {
  connection_limit,  // locality cap on outgoing inter-ISP connections
  torrent_size,      // total peers, spread evenly over the ISP layout
  peers_per_isp,     // per-ISP peer count (total = value * n_isps)
  egress_capacity,   // per-ISP outgoing bandwidth cap, bytes/s
};

inline const char* axis_key(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::connection_limit: return "limit";
    case SweepAxis::torrent_size: return "peers";
    case SweepAxis::peers_per_isp: return "peers_per_isp";
    case SweepAxis::egress_capacity: return "egress_cap";
  }
  return "?";
}

inline SweepAxis parse_axis(const std::string& name) {
  if (name == "limit") return SweepAxis::connection_limit;
  if (name == "peers") return SweepAxis::torrent_size;
  if (name == "peers_per_isp") return SweepAxis::peers_per_isp;
  if (name == "egress_cap") return SweepAxis::egress_capacity;
  throw config_error("sweep_axis must be limit, peers, peers_per_isp or egress_cap (got '" +
                     name + "')");
}

struct SweepSpec {
  ScenarioConfig base;
  SweepAxis axis = SweepAxis::connection_limit;
  std::vector<double> values;
  std::uint32_t repetitions = 1;
};

namespace detail {

inline std::uint64_t axis_count(double v, const char* key) {
  if (!(v >= 1.0) || v != std::floor(v) || v > 4e9)
    throw config_error(std::string(key) + " sweep values must be positive integers (got " +
                       fmt_fixed(v) + ")");
  return static_cast<std::uint64_t>(v);
}

}  // namespace detail

// The cell config for one axis value, with full validation. Throws
// config_error when the value does not fit the axis or the base scenario.
inline ScenarioConfig axis_applied(const ScenarioConfig& base, SweepAxis axis, double value) {
  ScenarioConfig cfg = base;
  switch (axis) {
    case SweepAxis::connection_limit: {
      if (cfg.policy.kind != PolicyKind::locality)
        throw config_error("a limit sweep requires policy = locality");
      cfg.policy.limit = detail::axis_count(value, "limit");
      break;
    }
    case SweepAxis::torrent_size: {
      const std::uint64_t n = detail::axis_count(value, "peers");
      const std::uint64_t k = cfg.n_isps();
      if (n % k != 0)
        throw config_error("peers sweep value " + std::to_string(n) + " not divisible by " +
                           std::to_string(k) + " ISPs");
      cfg.torrent_size = static_cast<std::uint32_t>(n);
      cfg.isp_counts.assign(k, static_cast<std::uint32_t>(n / k));
      break;
    }
    case SweepAxis::peers_per_isp: {
      const std::uint64_t per = detail::axis_count(value, "peers_per_isp");
      cfg.isp_counts.assign(cfg.isp_counts.size(), static_cast<std::uint32_t>(per));
      cfg.torrent_size = static_cast<std::uint32_t>(per * cfg.n_isps());
      break;
    }
    case SweepAxis::egress_capacity: {
      if (!(value > 0))
        throw config_error("egress_cap sweep values must be positive (got " + fmt_fixed(value) +
                           ")");
      cfg.egress_cap = value;
      break;
    }
  }
  cfg.validate();
  return cfg;
}

// Seed for repetition `rep` of any cell. Repetition 0 keeps the base seed, so
// a one-value, one-repetition sweep is exactly the single run of that config;
// later repetitions draw independent seeds from a SplitMix64 sequence.
inline std::uint64_t rep_seed(std::uint64_t base, std::uint32_t rep) {
  if (rep == 0) return base;
  std::uint64_t state = base + 0x9e3779b97f4a7c15ull * (rep - 1);
  return splitmix64(state);
}

inline ScenarioConfig cell_config(const SweepSpec& spec, std::size_t value_index,
                                  std::uint32_t rep) {
  ScenarioConfig cfg = axis_applied(spec.base, spec.axis, spec.values.at(value_index));
  cfg.rng_seed = rep_seed(spec.base.rng_seed, rep);
  return cfg;
}

// Parse sweep_axis / sweep_values / sweep_reps from a scenario file. The
// non-sweep keys form the base config. Value lists accept plain numbers and
// inclusive first:last:step ranges, comma-separated.
inline SweepSpec parse_sweep(const std::string& text) {
  using namespace detail;
  SweepSpec spec;
  spec.base = parse_scenario(text);

  bool saw_axis = false;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string s = trim(raw);
    if (s.empty() || s[0] == '#') continue;
    auto eq = s.find('=');
    if (eq == std::string::npos) continue;  // parse_scenario already rejected it
    std::string key = trim(s.substr(0, eq));
    std::string val = trim(s.substr(eq + 1));
    if (key.rfind("sweep_", 0) != 0) continue;
    if (key == "sweep_axis") {
      spec.axis = parse_axis(val);
      saw_axis = true;
    } else if (key == "sweep_values") {
      for (const std::string& item : split(val, ',')) {
        auto c1 = item.find(':');
        if (c1 == std::string::npos) {
          spec.values.push_back(parse_num(item, key, line));
          continue;
        }
        auto c2 = item.find(':', c1 + 1);
        if (c2 == std::string::npos)
          throw config_error("line " + std::to_string(line) +
                             ": sweep ranges are first:last:step");
        const double first = parse_num(trim(item.substr(0, c1)), key, line);
        const double last = parse_num(trim(item.substr(c1 + 1, c2 - c1 - 1)), key, line);
        const double step = parse_num(trim(item.substr(c2 + 1)), key, line);
        if (!(step > 0) || last < first)
          throw config_error("line " + std::to_string(line) +
                             ": sweep range needs last >= first and step > 0");
        for (double v = first; v <= last + step * 1e-9; v += step) spec.values.push_back(v);
      }
    } else if (key == "sweep_reps") {
      spec.repetitions = static_cast<std::uint32_t>(parse_u64(val, key, line));
      if (spec.repetitions == 0)
        throw config_error("line " + std::to_string(line) + ": sweep_reps must be at least 1");
    } else {
      throw config_error("line " + std::to_string(line) + ": unknown key '" + key + "'");
    }
  }
  if (!saw_axis) throw config_error("sweep file needs a sweep_axis key");
  if (spec.values.empty()) throw config_error("sweep file needs a non-empty sweep_values list");
  // Type-check every value against the axis up front, before anything runs.
  for (double v : spec.values) (void)axis_applied(spec.base, spec.axis, v);
  return spec;
}

struct SweepCell {
  double value = 0.0;
  std::uint32_t rep = 0;
  ScenarioConfig cfg;    // effective cell config (axis applied, seed derived)
  bool failed = false;
  std::string error;     // abort reason or exception text when failed
  MetricsReport report;  // valid when !failed
};

struct SweepArtifacts {
  int exit_code = exit_ok;
  SweepSpec spec;
  std::vector<SweepCell> cells;  // value-major, repetitions inside
  std::string manifest;
  std::string csv;               // the sweep table exactly as written
  std::vector<std::filesystem::path> files;
};

namespace detail {

// Axis values print as integers when they are integers (limit, peer counts);
// fractional capacities keep the fixed six-digit form.
inline std::string fmt_axis(double v) {
  if (v == std::floor(v) && std::abs(v) < 9e15)
    return std::to_string(static_cast<long long>(v));
  return fmt_fixed(v);
}

inline std::string sweep_manifest(const SweepSpec& spec) {
  return "#manifest format=1 config=" + hex64(fnv1a64(spec.base.canonical())) +
         " seed=" + std::to_string(spec.base.rng_seed) + " axis=" + axis_key(spec.axis) +
         " values=" + std::to_string(spec.values.size()) +
         " reps=" + std::to_string(spec.repetitions);
}

inline std::string sweep_csv(const SweepArtifacts& a) {
  const SweepSpec& spec = a.spec;
  std::string out = a.manifest + "\n";
  out += "axis_value,rep,";
  out += kMetricsCsvColumns;
  out += '\n';
  for (std::size_t vi = 0; vi < spec.values.size(); ++vi) {
    const std::string value_text = fmt_axis(spec.values[vi]);
    // Per-value aggregation over the successful repetitions.
    std::uint32_t ok = 0;
    int peers = 0;
    double sum_overhead = 0.0, sum_p95 = 0.0, sum_sd = 0.0;
    double sd_min = 0.0, sd_max = 0.0;
    for (std::uint32_t rep = 0; rep < spec.repetitions; ++rep) {
      const SweepCell& cell = a.cells[vi * spec.repetitions + rep];
      if (cell.failed) {
        out += "# cell axis_value=" + value_text + " rep=" + std::to_string(rep) +
               " failed: " + cell.error + "\n";
        continue;
      }
      for (const IspMetricsRow& row : cell.report.rows) {
        out += value_text;
        out += ',';
        out += std::to_string(rep);
        out += ',';
        out += metrics_csv_row(row);
        out += '\n';
      }
      out += value_text + ',' + std::to_string(rep) + ',' + metrics_csv_mean_row(cell.report);
      out += '\n';
      peers = cell.report.total_peers;
      sum_overhead += cell.report.mean_overhead;
      sum_p95 += cell.report.mean_p95;
      sum_sd += cell.report.slowdown_mean;
      sd_min = ok == 0 ? cell.report.slowdown_min : std::min(sd_min, cell.report.slowdown_min);
      sd_max = ok == 0 ? cell.report.slowdown_max : std::max(sd_max, cell.report.slowdown_max);
      ++ok;
    }
    if (ok > 0) {
      out += value_text + ",mean,mean," + std::to_string(peers) + ',' +
             fmt_fixed(sum_overhead / ok) + ',' + fmt_fixed(sum_p95 / ok) + ',' +
             fmt_fixed(sum_sd / ok) + ',' + fmt_fixed(sd_min) + ',' + fmt_fixed(sd_max) + '\n';
    }
  }
  return out;
}

inline std::string sweep_json(const SweepArtifacts& a) {
  nlohmann::ordered_json j;
  j["manifest"] = {{"format", 1},
                   {"config", hex64(fnv1a64(a.spec.base.canonical()))},
                   {"seed", a.spec.base.rng_seed},
                   {"axis", axis_key(a.spec.axis)},
                   {"values", a.spec.values.size()},
                   {"reps", a.spec.repetitions}};
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const SweepCell& cell : a.cells) {
    nlohmann::ordered_json c;
    c["axis_value"] = cell.value;
    c["rep"] = cell.rep;
    c["seed"] = cell.cfg.rng_seed;
    c["failed"] = cell.failed;
    if (cell.failed)
      c["error"] = cell.error;
    else
      c["metrics"] = metrics_report_json(cell.report);
    cells.push_back(std::move(c));
  }
  j["cells"] = std::move(cells);
  return j.dump(2) + "\n";
}

}  // namespace detail

// Run every (value, repetition) cell. Cells are independent (own config, own
// seed, own simulator), so they may run on `threads` workers; the output
// order never depends on the thread count.
inline SweepArtifacts run_sweep(const SweepSpec& spec, unsigned threads = 1) {
  SweepArtifacts a;
  a.spec = spec;
  a.cells.resize(spec.values.size() * spec.repetitions);
  for (std::size_t vi = 0; vi < spec.values.size(); ++vi) {
    for (std::uint32_t rep = 0; rep < spec.repetitions; ++rep) {
      SweepCell& cell = a.cells[vi * spec.repetitions + rep];
      cell.value = spec.values[vi];
      cell.rep = rep;
      try {
        cell.cfg = cell_config(spec, vi, rep);
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&a, &next] {
    for (std::size_t i; (i = next.fetch_add(1)) < a.cells.size();) {
      SweepCell& cell = a.cells[i];
      if (cell.failed) continue;
      try {
        RunResult r = SwarmSim::run(cell.cfg);
        if (r.aborted) {
          cell.failed = true;
          cell.error = r.abort_reason;
        } else {
          cell.report = report(r.ledger, r.completions, metrics_params_for(cell.cfg, r));
        }
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }

  a.manifest = detail::sweep_manifest(spec);
  a.csv = detail::sweep_csv(a);
  for (const SweepCell& cell : a.cells)
    if (cell.failed) a.exit_code = exit_partial_sweep;
  return a;
}

inline void write_sweep_outputs(SweepArtifacts& a, const RunOptions& opt) {
  const std::string stem = opt.stem.empty() ? "sweep" : opt.stem;
  const std::filesystem::path base = opt.out_dir / stem;
  std::filesystem::path csv = base;
  csv += ".sweep.csv";
  write_file_atomic(csv, a.csv);
  a.files.push_back(csv);
  if (opt.json) {
    std::filesystem::path jp = base;
    jp += ".sweep.json";
    write_file_atomic(jp, detail::sweep_json(a));
    a.files.push_back(jp);
  }
}

inline SweepArtifacts run_sweep_file(const std::filesystem::path& path, RunOptions opt = {},
                                     unsigned threads = 1) {
  SweepSpec spec = parse_sweep(read_file(path));
  if (opt.seed_override) spec.base.rng_seed = *opt.seed_override;
  if (opt.stem.empty()) opt.stem = path.stem().string();
  SweepArtifacts a = run_sweep(spec, threads);
  write_sweep_outputs(a, opt);
  return a;
}

// ---------------------------------------------------------------------------
// Analytic estimates.

struct EstimateArtifacts {
  int exit_code = exit_ok;
  CumulativeReport report;
  std::string manifest;
  std::string rows_csv;      // per (torrent, AS), input order
  std::string torrents_csv;  // per-torrent totals, descending, with running sums
  std::string as_csv;        // per-AS totals, descending, with running sums
  std::vector<std::filesystem::path> files;
};

namespace detail {

inline std::string curve_csv(const char* id_col, const std::vector<CurvePoint>& curve,
                             const TrafficTotals& totals, const std::string& manifest) {
  std::string out = manifest + "\n";
  out += id_col;
  out +=
      ",random_bytes,locality_bytes,ideal_bytes,cum_random_bytes,cum_locality_bytes,"
      "cum_ideal_bytes\n";
  for (const CurvePoint& p : curve) {
    out += p.id;
    out += ',';
    out += i128_str(p.own.random);
    out += ',';
    out += i128_str(p.own.locality);
    out += ',';
    out += i128_str(p.own.ideal);
    out += ',';
    out += i128_str(p.cumulative.random);
    out += ',';
    out += i128_str(p.cumulative.locality);
    out += ',';
    out += i128_str(p.cumulative.ideal);
    out += '\n';
  }
  out += "total," + i128_str(totals.random) + ',' + i128_str(totals.locality) + ',' +
         i128_str(totals.ideal) + ",,,\n";
  return out;
}

inline nlohmann::ordered_json totals_json(const TrafficTotals& t) {
  return {{"random_bytes", i128_str(t.random)},
          {"locality_bytes", i128_str(t.locality)},
          {"ideal_bytes", i128_str(t.ideal)}};
}

inline nlohmann::ordered_json curve_json(const std::vector<CurvePoint>& curve) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const CurvePoint& p : curve) {
    arr.push_back({{"id", p.id},
                   {"own", totals_json(p.own)},
                   {"cumulative", totals_json(p.cumulative)}});
  }
  return arr;
}

inline std::string estimate_json(const EstimateArtifacts& a) {
  nlohmann::ordered_json j;
  j["manifest"] = a.manifest.substr(1);  // keep the content, drop the '#'
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const EstimateRow& r : a.report.rows) {
    rows.push_back({{"torrent_id", r.torrent_id},
                    {"as_id", r.as_id},
                    {"S_A", r.peers},
                    {"random_bytes", r.random_bytes},
                    {"locality_bytes", r.locality_bytes},
                    {"ideal_bytes", r.ideal_bytes}});
  }
  j["rows"] = std::move(rows);
  j["totals"] = totals_json(a.report.totals);
  j["torrent_curve"] = curve_json(a.report.torrent_curve);
  j["as_curve"] = curve_json(a.report.as_curve);
  return j.dump(2) + "\n";
}

}  // namespace detail

inline EstimateArtifacts run_estimate(const std::string& profiles_text,
                                      const std::string& savings_text) {
  EstimateArtifacts a;
  const std::vector<TorrentProfile> profiles = parse_profiles_csv(profiles_text);
  const SavingsTable table = parse_savings_csv(savings_text);
  a.report = aggregate(profiles, table);
  a.manifest = "#manifest format=1 profiles=" + hex64(fnv1a64(profiles_text)) +
               " savings=" + hex64(fnv1a64(savings_text));
  a.rows_csv = a.manifest + "\n";
  a.rows_csv += "torrent_id,as_id,S_A,random_bytes,locality_bytes,ideal_bytes\n";
  for (const EstimateRow& r : a.report.rows) {
    a.rows_csv += r.torrent_id;
    a.rows_csv += ',';
    a.rows_csv += r.as_id;
    a.rows_csv += ',';
    a.rows_csv += std::to_string(r.peers);
    a.rows_csv += ',';
    a.rows_csv += std::to_string(r.random_bytes);
    a.rows_csv += ',';
    a.rows_csv += std::to_string(r.locality_bytes);
    a.rows_csv += ',';
    a.rows_csv += std::to_string(r.ideal_bytes);
    a.rows_csv += '\n';
  }
  a.torrents_csv = detail::curve_csv("torrent_id", a.report.torrent_curve, a.report.totals,
                                     a.manifest);
  a.as_csv = detail::curve_csv("as_id", a.report.as_curve, a.report.totals, a.manifest);
  return a;
}

inline void write_estimate_outputs(EstimateArtifacts& a, const RunOptions& opt) {
  const std::string stem = opt.stem.empty() ? "estimate" : opt.stem;
  const std::filesystem::path base = opt.out_dir / stem;
  const auto emit = [&](const char* suffix, const std::string& content) {
    std::filesystem::path p = base;
    p += suffix;
    write_file_atomic(p, content);
    a.files.push_back(p);
  };
  emit(".csv", a.rows_csv);
  emit(".torrents.csv", a.torrents_csv);
  emit(".as.csv", a.as_csv);
  if (opt.json) emit(".json", detail::estimate_json(a));
}

inline EstimateArtifacts run_estimate_files(const std::filesystem::path& profiles_path,
                                            const std::filesystem::path& savings_path,
                                            RunOptions opt = {}) {
  EstimateArtifacts a = run_estimate(read_file(profiles_path), read_file(savings_path));
  write_estimate_outputs(a, opt);
  return a;
}

}  // namespace localswarm

#pragma once
// Evaluation metrics computed offline from a TransferLedger: per-ISP overhead
// (inter-ISP upload normalized by content size), per-ISP 95th-percentile
// five-minute window, and per-peer slowdown versus the capacity-ideal
// download time.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "localswarm/io_util.hpp"
#include "localswarm/ledger.hpp"

namespace localswarm {

namespace detail {

inline void check_isp(const TransferLedger& ledger, int isp) {
  if (isp < 0 || isp >= ledger.n_isps()) throw std::invalid_argument("metrics: unknown ISP");
}

}  // namespace detail

// Total bytes uploaded from peers of `isp` to peers of any other ISP.
inline std::uint64_t interisp_bytes_from(const TransferLedger& ledger, int isp) {
  detail::check_isp(ledger, isp);
  std::uint64_t total = 0;
  for (const TransferRecord& r : ledger.records())
    if (ledger.isp_of(r.src_peer) == isp && ledger.isp_of(r.dst_peer) != isp) total += r.bytes;
  return total;
}

// Bytes uploaded from `src_isp` to `dst_isp`: the per-link view of the same
// traffic (one directed link per ISP pair).
inline std::uint64_t link_bytes(const TransferLedger& ledger, int src_isp, int dst_isp) {
  detail::check_isp(ledger, src_isp);
  detail::check_isp(ledger, dst_isp);
  std::uint64_t total = 0;
  for (const TransferRecord& r : ledger.records())
    if (ledger.isp_of(r.src_peer) == src_isp && ledger.isp_of(r.dst_peer) == dst_isp)
      total += r.bytes;
  return total;
}

// Inter-ISP upload from `isp`, in content units (dimensionless).
inline double overhead(const TransferLedger& ledger, int isp, std::uint64_t content_size) {
  if (content_size == 0) throw std::invalid_argument("metrics: zero content size");
  return static_cast<double>(interisp_bytes_from(ledger, isp)) / static_cast<double>(content_size);
}

// Per-window inter-ISP upload bytes from `isp`, over consecutive fixed windows
// anchored at t=0 and covering [0, end_time]; the trailing partial window is
// included as-is. Records stamped exactly at the run end fall into the final
// window.
inline std::vector<std::uint64_t> window_bytes(const TransferLedger& ledger, int isp,
                                               double window = 300.0) {
  detail::check_isp(ledger, isp);
  if (window <= 0.0) throw std::invalid_argument("metrics: window must be positive");
  const double end = ledger.end_time();
  if (end <= 0.0) throw std::invalid_argument("metrics: empty run");
  const auto n_windows = static_cast<std::size_t>(std::ceil(end / window));
  std::vector<std::uint64_t> bytes(n_windows, 0);
  for (const TransferRecord& r : ledger.records()) {
    if (ledger.isp_of(r.src_peer) != isp || ledger.isp_of(r.dst_peer) == isp) continue;
    auto idx = static_cast<std::size_t>(r.time / window);
    if (idx >= n_windows) idx = n_windows - 1;
    bytes[idx] += r.bytes;
  }
  return bytes;
}

// Value at rank ceil(0.95 * W) (1-indexed) of the ascending sort of the W
// window totals; no interpolation.
inline std::uint64_t percentile95(const TransferLedger& ledger, int isp, double window = 300.0) {
  std::vector<std::uint64_t> bytes = window_bytes(ledger, isp, window);
  std::sort(bytes.begin(), bytes.end());
  const std::size_t rank = (95 * bytes.size() + 99) / 100;  // ceil(0.95 W), exact in integers
  return bytes[rank - 1];
}

// Download time over the capacity-ideal time content_size / mean_max_upload.
inline double slowdown(const CompletionRecord& rec, double mean_max_upload,
                       std::uint64_t content_size) {
  if (mean_max_upload <= 0.0) throw std::invalid_argument("metrics: mean upload must be positive");
  const double ideal = static_cast<double>(content_size) / mean_max_upload;
  return (rec.completion - rec.arrival) / ideal;
}

struct IspMetricsRow {
  int isp = 0;
  int peers = 0;  // peers homed in this ISP over the whole run
  double overhead = 0.0;
  std::uint64_t p95_bytes = 0;
  // Slowdown statistics over this ISP's completed peers; zero when none completed.
  int completed = 0;
  double slowdown_mean = 0.0;
  double slowdown_min = 0.0;
  double slowdown_max = 0.0;
};

struct MetricsReport {
  std::vector<IspMetricsRow> rows;  // real ISPs only, ascending id
  double mean_overhead = 0.0;       // mean over rows
  double mean_p95 = 0.0;            // mean over rows
  int total_peers = 0;              // peers homed in real ISPs
  int total_completed = 0;
  double slowdown_mean = 0.0;  // over all completed peers in real ISPs
  double slowdown_min = 0.0;
  double slowdown_max = 0.0;
};

struct MetricsParams {
  std::uint64_t content_size = 0;
  int n_isps = 0;            // real ISPs are 0 .. n_isps-1
  int pseudo_isp = -1;       // home of the initial seed; ledgered but not reported
  double mean_max_upload = 0.0;  // bytes/s, over the run's peers minus the initial seed
  double window = 300.0;
};

inline MetricsReport report(const TransferLedger& ledger,
                            const std::vector<CompletionRecord>& completions,
                            const MetricsParams& params) {
  if (params.n_isps <= 0) throw std::invalid_argument("metrics: report needs at least one ISP");
  MetricsReport rep;
  rep.rows.resize(static_cast<std::size_t>(params.n_isps));

  std::vector<std::vector<double>> per_isp_slowdowns(static_cast<std::size_t>(params.n_isps));
  for (const CompletionRecord& c : completions) {
    const int isp = ledger.isp_of(c.peer);
    if (isp == params.pseudo_isp) continue;
    if (isp < 0 || isp >= params.n_isps) throw std::invalid_argument("metrics: unknown ISP");
    per_isp_slowdowns[static_cast<std::size_t>(isp)].push_back(
        slowdown(c, params.mean_max_upload, params.content_size));
  }

  std::vector<int> peers_per_isp(static_cast<std::size_t>(params.n_isps), 0);
  for (int isp : ledger.peer_isp()) {
    if (isp == params.pseudo_isp) continue;
    if (isp < 0 || isp >= params.n_isps) throw std::invalid_argument("metrics: unknown ISP");
    ++peers_per_isp[static_cast<std::size_t>(isp)];
  }

  const bool have_traffic = ledger.end_time() > 0.0 && !ledger.records().empty();
  double sum_overhead = 0.0;
  double sum_p95 = 0.0;
  double sd_sum = 0.0;
  double sd_min = std::numeric_limits<double>::infinity();
  double sd_max = -std::numeric_limits<double>::infinity();
  for (int isp = 0; isp < params.n_isps; ++isp) {
    IspMetricsRow& row = rep.rows[static_cast<std::size_t>(isp)];
    row.isp = isp;
    row.peers = peers_per_isp[static_cast<std::size_t>(isp)];
    row.overhead = overhead(ledger, isp, params.content_size);
    row.p95_bytes = have_traffic ? percentile95(ledger, isp, params.window) : 0;
    const std::vector<double>& sds = per_isp_slowdowns[static_cast<std::size_t>(isp)];
    row.completed = static_cast<int>(sds.size());
    if (!sds.empty()) {
      double lo = sds[0], hi = sds[0], sum = 0.0;
      for (double s : sds) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
        sum += s;
      }
      row.slowdown_mean = sum / static_cast<double>(sds.size());
      row.slowdown_min = lo;
      row.slowdown_max = hi;
      sd_sum += sum;
      sd_min = std::min(sd_min, lo);
      sd_max = std::max(sd_max, hi);
      rep.total_completed += row.completed;
    }
    sum_overhead += row.overhead;
    sum_p95 += static_cast<double>(row.p95_bytes);
    rep.total_peers += row.peers;
  }
  rep.mean_overhead = sum_overhead / static_cast<double>(params.n_isps);
  rep.mean_p95 = sum_p95 / static_cast<double>(params.n_isps);
  if (rep.total_completed > 0) {
    rep.slowdown_mean = sd_sum / static_cast<double>(rep.total_completed);
    rep.slowdown_min = sd_min;
    rep.slowdown_max = sd_max;
  }
  return rep;
}

// Shared CSV column block for the report tables. The sweep writer prefixes
// these same cells with its own columns, so a sweep cell's rows stay
// byte-identical with the single-run table for that cell.
inline constexpr const char* kMetricsCsvColumns =
    "isp,peers,overhead,p95_bytes,slowdown_mean,slowdown_min,slowdown_max";

// One per-ISP data line, without trailing newline.
inline std::string metrics_csv_row(const IspMetricsRow& row) {
  std::string out = std::to_string(row.isp);
  out += ',';
  out += std::to_string(row.peers);
  out += ',';
  out += fmt_fixed(row.overhead);
  out += ',';
  out += std::to_string(row.p95_bytes);
  out += ',';
  out += fmt_fixed(row.slowdown_mean);
  out += ',';
  out += fmt_fixed(row.slowdown_min);
  out += ',';
  out += fmt_fixed(row.slowdown_max);
  return out;
}

// The summary line ("mean" in the isp column), without trailing newline.
inline std::string metrics_csv_mean_row(const MetricsReport& rep) {
  std::string out = "mean,";
  out += std::to_string(rep.total_peers);
  out += ',';
  out += fmt_fixed(rep.mean_overhead);
  out += ',';
  out += fmt_fixed(rep.mean_p95);
  out += ',';
  out += fmt_fixed(rep.slowdown_mean);
  out += ',';
  out += fmt_fixed(rep.slowdown_min);
  out += ',';
  out += fmt_fixed(rep.slowdown_max);
  return out;
}

// CSV serialization. `manifest` is the "#manifest ..." header line (without
// newline); pass empty to omit it.
inline std::string metrics_csv(const MetricsReport& rep, const std::string& manifest = "") {
  std::string out;
  if (!manifest.empty()) out += manifest + "\n";
  out += kMetricsCsvColumns;
  out += '\n';
  for (const IspMetricsRow& row : rep.rows) {
    out += metrics_csv_row(row);
    out += '\n';
  }
  out += metrics_csv_mean_row(rep);
  out += '\n';
  return out;
}

}  // namespace localswarm

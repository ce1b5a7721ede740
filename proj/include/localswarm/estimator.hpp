#pragma once
// Analytic estimate of inter-AS upload traffic for crawl-scale torrent
// populations. Under a random peer-selection policy, an AS holding S_A of a
// torrent's S_T peers uploads (1 - S_A/S_T) * S_A * C bytes across its border
// for a content of C bytes. Measured per-AS-size savings fractions map that
// model onto the locality policy, and an ideal baseline charges one content
// copy into every populated AS except the one hosting the initial seed
// (taken to be the largest AS; ties broken by lexicographically smallest id).
//
// All model arithmetic is exact: 128-bit integer numerators over the S_T
// denominator, rounded half-up only when a per-row byte count is materialized.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "localswarm/scenario.hpp"  // config_error, detail::split/trim/parse helpers

namespace localswarm {

using int128 = __int128;

inline std::string i128_str(int128 v) {
  if (v == 0) return "0";
  const bool neg = v < 0;
  unsigned __int128 mag = neg ? static_cast<unsigned __int128>(-v) : static_cast<unsigned __int128>(v);
  std::string digits;
  while (mag > 0) {
    digits.push_back(static_cast<char>('0' + static_cast<int>(mag % 10)));
    mag /= 10;
  }
  if (neg) digits.push_back('-');
  std::reverse(digits.begin(), digits.end());
  return digits;
}

struct AsCount {
  std::string as_id;
  std::uint64_t peers = 0;
};

struct TorrentProfile {
  std::string torrent_id;
  std::vector<AsCount> as_counts;
  std::uint64_t content_bytes = 0;

  std::uint64_t total_peers() const {
    std::uint64_t total = 0;
    for (const AsCount& a : as_counts) total += a.peers;
    return total;
  }

  void validate() const {
    if (torrent_id.empty()) throw config_error("profile: empty torrent id");
    if (content_bytes == 0) throw config_error("profile '" + torrent_id + "': zero content size");
    if (as_counts.empty()) throw config_error("profile '" + torrent_id + "': no AS rows");
    std::vector<std::string> ids;
    for (const AsCount& a : as_counts) {
      if (a.as_id.empty()) throw config_error("profile '" + torrent_id + "': empty AS id");
      if (a.peers == 0)
        throw config_error("profile '" + torrent_id + "': AS " + a.as_id + " has zero peers");
      ids.push_back(a.as_id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
      throw config_error("profile '" + torrent_id + "': duplicate AS id");
  }
};

// Numerator of the exact model value: C * S_A * (S_T - S_A). The model value
// is this over S_T.
inline int128 model_upload_num(std::uint64_t s_a, std::uint64_t s_t, std::uint64_t content) {
  if (s_a < 1 || s_a > s_t) throw config_error("model: AS size must be in [1, torrent size]");
  if (content == 0) throw config_error("model: zero content size");
  return static_cast<int128>(content) * static_cast<int128>(s_a) *
         static_cast<int128>(s_t - s_a);
}

inline std::uint64_t round_div_half_up_u64(int128 num, std::uint64_t den) {
  const int128 q = num / static_cast<int128>(den);
  const int128 r = num % static_cast<int128>(den);
  return static_cast<std::uint64_t>(q + (2 * r >= static_cast<int128>(den) ? 1 : 0));
}

// (1 - S_A/S_T) * S_A * C in bytes, rounded half-up at this materialization.
inline std::uint64_t model_upload(std::uint64_t s_a, std::uint64_t s_t, std::uint64_t content) {
  return round_div_half_up_u64(model_upload_num(s_a, s_t, content), s_t);
}

// Savings fractions by AS size. Lookup interpolates piecewise-linearly in
// log(as_size) and clamps to the table endpoints; a one-peer AS always gets
// saving 0 (it has nothing to localize), and an empty table means no savings
// anywhere.
class SavingsTable {
 public:
  SavingsTable() = default;
  explicit SavingsTable(std::vector<std::pair<std::uint64_t, double>> entries)
      : entries_(std::move(entries)) {
    std::sort(entries_.begin(), entries_.end());
    validate();
  }

  const std::vector<std::pair<std::uint64_t, double>>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  double lookup(std::uint64_t as_size) const {
    if (as_size == 0) throw config_error("savings: AS size must be positive");
    if (as_size == 1 || entries_.empty()) return 0.0;
    if (as_size <= entries_.front().first) return entries_.front().second;
    if (as_size >= entries_.back().first) return entries_.back().second;
    // First entry strictly above as_size; the table has distinct sizes.
    auto hi = std::upper_bound(entries_.begin(), entries_.end(),
                               std::make_pair(as_size, std::numeric_limits<double>::infinity()));
    auto lo = hi - 1;
    if (lo->first == as_size) return lo->second;
    const double t = (std::log(static_cast<double>(as_size)) -
                      std::log(static_cast<double>(lo->first))) /
                     (std::log(static_cast<double>(hi->first)) -
                      std::log(static_cast<double>(lo->first)));
    return lo->second + t * (hi->second - lo->second);
  }

 private:
  void validate() const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& [size, saving] = entries_[i];
      if (size == 0) throw config_error("savings: AS size must be positive");
      if (saving < 0.0 || saving > 1.0) throw config_error("savings: fraction outside [0, 1]");
      if (size == 1 && saving != 0.0)
        throw config_error("savings: a one-peer AS cannot have a positive saving");
      if (i > 0) {
        if (entries_[i - 1].first == size) throw config_error("savings: duplicate AS size");
        if (entries_[i - 1].second > saving)
          throw config_error("savings: fractions must be nondecreasing in AS size");
      }
    }
  }

  std::vector<std::pair<std::uint64_t, double>> entries_;
};

// One (torrent, AS) estimate row: bytes uploaded across the AS border under
// the random policy, under the locality policy, and under the one-copy ideal.
struct EstimateRow {
  std::string torrent_id;
  std::string as_id;
  std::uint64_t peers = 0;
  std::uint64_t random_bytes = 0;
  std::uint64_t locality_bytes = 0;
  std::uint64_t ideal_bytes = 0;
};

// AS charged with hosting the initial seed: largest peer count, ties broken
// by lexicographically smallest id.
inline std::size_t seed_as_index(const TorrentProfile& profile) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < profile.as_counts.size(); ++i) {
    const AsCount& cand = profile.as_counts[i];
    const AsCount& cur = profile.as_counts[best];
    if (cand.peers > cur.peers || (cand.peers == cur.peers && cand.as_id < cur.as_id)) best = i;
  }
  return best;
}

inline std::vector<EstimateRow> estimate_torrent(const TorrentProfile& profile,
                                                 const SavingsTable& table) {
  profile.validate();
  const std::uint64_t s_t = profile.total_peers();
  const std::size_t seed_as = seed_as_index(profile);
  std::vector<EstimateRow> rows;
  rows.reserve(profile.as_counts.size());
  for (std::size_t i = 0; i < profile.as_counts.size(); ++i) {
    const AsCount& a = profile.as_counts[i];
    EstimateRow row;
    row.torrent_id = profile.torrent_id;
    row.as_id = a.as_id;
    row.peers = a.peers;
    const int128 num = model_upload_num(a.peers, s_t, profile.content_bytes);
    row.random_bytes = round_div_half_up_u64(num, s_t);
    const double keep = 1.0 - table.lookup(a.peers);
    row.locality_bytes = static_cast<std::uint64_t>(
        std::llround(static_cast<long double>(row.random_bytes) * static_cast<long double>(keep)));
    row.ideal_bytes = (i == seed_as) ? 0 : profile.content_bytes;
    rows.push_back(std::move(row));
  }
  return rows;
}

struct TrafficTotals {
  int128 random = 0;
  int128 locality = 0;
  int128 ideal = 0;
};

// Cumulative curve point: the entity's own traffic plus the running totals of
// the descending sort it belongs to.
struct CurvePoint {
  std::string id;
  TrafficTotals own;
  TrafficTotals cumulative;
};

struct CumulativeReport {
  std::vector<EstimateRow> rows;                   // per (torrent, AS), input order
  std::map<std::string, TrafficTotals> per_torrent;
  std::map<std::string, TrafficTotals> per_as;
  TrafficTotals totals;
  // Sorted descending by random-policy traffic (ties: id ascending), with
  // running sums for all three policies.
  std::vector<CurvePoint> torrent_curve;
  std::vector<CurvePoint> as_curve;
};

namespace detail {

inline std::vector<CurvePoint> build_curve(const std::map<std::string, TrafficTotals>& per_entity) {
  std::vector<CurvePoint> curve;
  curve.reserve(per_entity.size());
  for (const auto& [id, totals] : per_entity) curve.push_back({id, totals, {}});
  std::sort(curve.begin(), curve.end(), [](const CurvePoint& a, const CurvePoint& b) {
    if (a.own.random != b.own.random) return a.own.random > b.own.random;
    return a.id < b.id;
  });
  TrafficTotals running;
  for (CurvePoint& p : curve) {
    running.random += p.own.random;
    running.locality += p.own.locality;
    running.ideal += p.own.ideal;
    p.cumulative = running;
  }
  return curve;
}

}  // namespace detail

inline CumulativeReport aggregate(const std::vector<TorrentProfile>& profiles,
                                  const SavingsTable& table) {
  CumulativeReport report;
  for (const TorrentProfile& profile : profiles) {
    std::vector<EstimateRow> rows = estimate_torrent(profile, table);
    TrafficTotals& torrent = report.per_torrent[profile.torrent_id];
    for (EstimateRow& row : rows) {
      TrafficTotals& as_totals = report.per_as[row.as_id];
      for (TrafficTotals* t : {&torrent, &as_totals, &report.totals}) {
        t->random += static_cast<int128>(row.random_bytes);
        t->locality += static_cast<int128>(row.locality_bytes);
        t->ideal += static_cast<int128>(row.ideal_bytes);
      }
      report.rows.push_back(std::move(row));
    }
  }
  report.torrent_curve = detail::build_curve(report.per_torrent);
  report.as_curve = detail::build_curve(report.per_as);
  return report;
}

// ---------------------------------------------------------------------------
// Profile and savings-table CSV formats.
//   profiles: torrent_id,as_id,peer_count,content_bytes   (one row per AS)
//   savings:  as_size,saving
// Lines starting with '#' and an optional header row are skipped.

inline std::vector<TorrentProfile> parse_profiles_csv(const std::string& text) {
  std::vector<TorrentProfile> profiles;
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 0;
  for (const std::string& raw : detail::split(text, '\n')) {
    ++line_no;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> cols = detail::split(line, ',');
    if (cols.size() == 4 && cols[0] == "torrent_id") continue;  // header
    if (cols.size() != 4)
      throw config_error("profiles line " + std::to_string(line_no) +
                         ": expected torrent_id,as_id,peer_count,content_bytes");
    const std::string& torrent_id = cols[0];
    const std::string& as_id = cols[1];
    const std::uint64_t peers = detail::parse_u64(cols[2], "peer_count", static_cast<int>(line_no));
    const std::uint64_t content =
        detail::parse_u64(cols[3], "content_bytes", static_cast<int>(line_no));
    auto [it, inserted] = index.emplace(torrent_id, profiles.size());
    if (inserted) profiles.push_back({torrent_id, {}, content});
    TorrentProfile& profile = profiles[it->second];
    if (profile.content_bytes != content)
      throw config_error("profiles line " + std::to_string(line_no) + ": torrent '" + torrent_id +
                         "' changes content size");
    profile.as_counts.push_back({as_id, peers});
  }
  for (const TorrentProfile& p : profiles) p.validate();
  return profiles;
}

inline std::string profiles_to_csv(const std::vector<TorrentProfile>& profiles) {
  std::string out = "torrent_id,as_id,peer_count,content_bytes\n";
  for (const TorrentProfile& p : profiles)
    for (const AsCount& a : p.as_counts)
      out += p.torrent_id + ',' + a.as_id + ',' + std::to_string(a.peers) + ',' +
             std::to_string(p.content_bytes) + '\n';
  return out;
}

inline SavingsTable parse_savings_csv(const std::string& text) {
  std::vector<std::pair<std::uint64_t, double>> entries;
  std::size_t line_no = 0;
  for (const std::string& raw : detail::split(text, '\n')) {
    ++line_no;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> cols = detail::split(line, ',');
    if (cols.size() == 2 && cols[0] == "as_size") continue;  // header
    if (cols.size() != 2)
      throw config_error("savings line " + std::to_string(line_no) + ": expected as_size,saving");
    entries.emplace_back(detail::parse_u64(cols[0], "as_size", static_cast<int>(line_no)),
                         detail::parse_num(cols[1], "saving", static_cast<int>(line_no)));
  }
  try {
    return SavingsTable(std::move(entries));
  } catch (const config_error& e) {
    throw config_error(std::string("savings table: ") + e.what());
  }
}

}  // namespace localswarm

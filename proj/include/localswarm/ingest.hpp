#pragma once
// Crawl-snapshot ingestion: parses text snapshots of torrent peer lists,
// deduplicates endpoints by (IP, port), maps peers to ASes by longest-prefix
// match over a CIDR table, and emits per-torrent AS profiles for the traffic
// estimator. Also provides the crawler-side calculation of how many
// tracker requests reach a target population coverage.
//
// Snapshot format: sections headed by `#torrent <id> <content_bytes>`, then
// one `ip:port` line per peer. Sections repeating a torrent id extend that
// torrent (same content size required). Files with more than 1% malformed
// lines are rejected with line diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "localswarm/estimator.hpp"  // TorrentProfile
#include "localswarm/scenario.hpp"   // config_error + parse helpers

namespace localswarm {

struct PeerEndpoint {
  std::uint32_t ip = 0;
  std::uint16_t port = 0;

  friend bool operator==(const PeerEndpoint& a, const PeerEndpoint& b) {
    return a.ip == b.ip && a.port == b.port;
  }
  friend bool operator<(const PeerEndpoint& a, const PeerEndpoint& b) {
    return a.ip != b.ip ? a.ip < b.ip : a.port < b.port;
  }
};

struct TorrentSnapshot {
  std::string torrent_id;
  std::uint64_t content_bytes = 0;
  std::vector<PeerEndpoint> peers;  // unique, first-seen order
};

struct SnapshotFile {
  std::vector<TorrentSnapshot> torrents;  // nonempty sections, file order
  std::size_t data_lines = 0;             // non-blank lines seen
  std::size_t malformed_lines = 0;        // counted, fatal only above 1%
  std::size_t duplicate_endpoints = 0;    // same (ip, port) repeated in a torrent
  std::vector<std::string> warnings;      // dropped empty sections, etc.
};

namespace detail {

inline std::optional<std::uint32_t> parse_ipv4(const std::string& s) {
  std::uint32_t ip = 0;
  std::size_t pos = 0;
  for (int octet = 0; octet < 4; ++octet) {
    if (pos >= s.size() || !std::isdigit(static_cast<unsigned char>(s[pos]))) return std::nullopt;
    std::uint32_t value = 0;
    std::size_t digits = 0;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
      value = value * 10 + static_cast<std::uint32_t>(s[pos] - '0');
      if (value > 255 || ++digits > 3) return std::nullopt;
      ++pos;
    }
    ip = (ip << 8) | value;
    if (octet < 3) {
      if (pos >= s.size() || s[pos] != '.') return std::nullopt;
      ++pos;
    }
  }
  if (pos != s.size()) return std::nullopt;
  return ip;
}

inline std::optional<PeerEndpoint> parse_endpoint(const std::string& s) {
  const std::size_t colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 >= s.size()) return std::nullopt;
  const std::optional<std::uint32_t> ip = parse_ipv4(s.substr(0, colon));
  if (!ip) return std::nullopt;
  std::uint32_t port = 0;
  for (std::size_t i = colon + 1; i < s.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return std::nullopt;
    port = port * 10 + static_cast<std::uint32_t>(s[i] - '0');
    if (port > 65'535) return std::nullopt;
  }
  return PeerEndpoint{*ip, static_cast<std::uint16_t>(port)};
}

}  // namespace detail

inline SnapshotFile parse_snapshot(const std::string& text) {
  SnapshotFile file;
  std::map<std::string, std::size_t> torrent_index;
  std::vector<std::set<PeerEndpoint>> seen;  // parallel to file.torrents
  std::vector<std::size_t> bad_lines;
  std::size_t current = static_cast<std::size_t>(-1);
  std::size_t line_no = 0;
  for (const std::string& raw : detail::split(text, '\n')) {
    ++line_no;
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    ++file.data_lines;
    if (line.rfind("#torrent", 0) == 0) {
      const std::vector<std::string> parts = detail::split(line, ' ');
      std::vector<std::string> fields;
      for (const std::string& p : parts)
        if (!p.empty()) fields.push_back(p);
      std::uint64_t content = 0;
      bool ok = fields.size() == 3 && !fields[1].empty();
      if (ok) {
        try {
          content = detail::parse_u64(fields[2], "content_bytes", static_cast<int>(line_no));
        } catch (const config_error&) {
          ok = false;
        }
      }
      if (!ok || content == 0) {
        ++file.malformed_lines;
        bad_lines.push_back(line_no);
        current = static_cast<std::size_t>(-1);
        continue;
      }
      const auto [it, inserted] = torrent_index.emplace(fields[1], file.torrents.size());
      if (inserted) {
        file.torrents.push_back({fields[1], content, {}});
        seen.emplace_back();
      } else if (file.torrents[it->second].content_bytes != content) {
        ++file.malformed_lines;
        bad_lines.push_back(line_no);
        current = static_cast<std::size_t>(-1);
        continue;
      }
      current = it->second;
      continue;
    }
    const std::optional<PeerEndpoint> endpoint = detail::parse_endpoint(line);
    if (!endpoint || current == static_cast<std::size_t>(-1)) {
      ++file.malformed_lines;
      bad_lines.push_back(line_no);
      continue;
    }
    if (seen[current].insert(*endpoint).second)
      file.torrents[current].peers.push_back(*endpoint);
    else
      ++file.duplicate_endpoints;
  }

  if (file.data_lines > 0 && 100 * file.malformed_lines > file.data_lines) {
    std::string msg = "snapshot: " + std::to_string(file.malformed_lines) + " of " +
                      std::to_string(file.data_lines) + " lines malformed (>1%); first bad lines:";
    for (std::size_t i = 0; i < bad_lines.size() && i < 5; ++i)
      msg += ' ' + std::to_string(bad_lines[i]);
    throw config_error(msg);
  }

  // Drop torrents that ended up with no peers.
  std::vector<TorrentSnapshot> kept;
  for (TorrentSnapshot& t : file.torrents) {
    if (t.peers.empty())
      file.warnings.push_back("torrent '" + t.torrent_id + "' has no peers; dropped");
    else
      kept.push_back(std::move(t));
  }
  file.torrents = std::move(kept);
  return file;
}

// CIDR prefix table with longest-prefix-match lookups. Entries are bucketed
// by prefix length; a lookup probes lengths from /32 down to /0.
class PrefixTable {
 public:
  void add(std::uint32_t network, int length, const std::string& as_id) {
    if (length < 0 || length > 32) throw config_error("prefix table: length outside [0, 32]");
    const std::uint32_t masked = network & mask(length);
    if (masked != network)
      throw config_error("prefix table: host bits set below the prefix length");
    auto [it, inserted] = buckets_[length].emplace(masked, as_id);
    if (!inserted && it->second != as_id)
      throw config_error("prefix table: conflicting entries for one prefix");
    size_ += inserted ? 1 : 0;
  }

  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  std::optional<std::string> lookup(std::uint32_t ip) const {
    for (int length = 32; length >= 0; --length) {
      const auto& bucket = buckets_[length];
      if (bucket.empty()) continue;
      const auto it = bucket.find(ip & mask(length));
      if (it != bucket.end()) return it->second;
    }
    return std::nullopt;
  }

 private:
  static std::uint32_t mask(int length) {
    return length == 0 ? 0u : ~std::uint32_t{0} << (32 - length);
  }

  std::unordered_map<std::uint32_t, std::string> buckets_[33];
  std::size_t size_ = 0;
};

// Prefix table CSV: `cidr,asn`, e.g. `10.1.0.0/16,AS64500`.
inline PrefixTable parse_prefix_csv(const std::string& text) {
  PrefixTable table;
  std::size_t line_no = 0;
  for (const std::string& raw : detail::split(text, '\n')) {
    ++line_no;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> cols = detail::split(line, ',');
    if (cols.size() == 2 && cols[0] == "cidr") continue;  // header
    if (cols.size() != 2 || cols[1].empty())
      throw config_error("prefix table line " + std::to_string(line_no) + ": expected cidr,asn");
    const std::vector<std::string> cidr = detail::split(cols[0], '/');
    std::optional<std::uint32_t> network;
    std::uint64_t length = 33;
    if (cidr.size() == 2) {
      network = detail::parse_ipv4(cidr[0]);
      try {
        length = detail::parse_u64(cidr[1], "prefix length", static_cast<int>(line_no));
      } catch (const config_error&) {
        length = 33;
      }
    }
    if (!network || length > 32)
      throw config_error("prefix table line " + std::to_string(line_no) + ": bad CIDR '" +
                         cols[0] + "'");
    try {
      table.add(*network, static_cast<int>(length), cols[1]);
    } catch (const config_error& e) {
      throw config_error("prefix table line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return table;
}

struct AsMapping {
  std::vector<std::pair<std::string, std::uint64_t>> counts;  // sorted by as_id
  std::uint64_t unmapped = 0;
};

inline AsMapping map_to_as(const std::vector<PeerEndpoint>& peers, const PrefixTable& table) {
  if (table.empty()) throw config_error("prefix table is empty");
  std::map<std::string, std::uint64_t> counts;
  AsMapping out;
  for (const PeerEndpoint& peer : peers) {
    const std::optional<std::string> as_id = table.lookup(peer.ip);
    if (as_id)
      ++counts[*as_id];
    else
      ++out.unmapped;
  }
  out.counts.assign(counts.begin(), counts.end());
  return out;
}

// Snapshot -> estimator profiles. Unmapped peers are excluded (and counted);
// torrents whose peers are all unmapped are dropped with a warning.
inline std::vector<TorrentProfile> make_profiles(const SnapshotFile& file, const PrefixTable& table,
                                                 std::vector<std::string>* warnings = nullptr,
                                                 std::uint64_t* unmapped_total = nullptr) {
  std::vector<TorrentProfile> profiles;
  for (const TorrentSnapshot& t : file.torrents) {
    const AsMapping mapping = map_to_as(t.peers, table);
    if (unmapped_total) *unmapped_total += mapping.unmapped;
    if (mapping.counts.empty()) {
      if (warnings)
        warnings->push_back("torrent '" + t.torrent_id + "': no peer mapped to an AS; dropped");
      continue;
    }
    TorrentProfile profile;
    profile.torrent_id = t.torrent_id;
    profile.content_bytes = t.content_bytes;
    for (const auto& [as_id, count] : mapping.counts) profile.as_counts.push_back({as_id, count});
    profile.validate();
    profiles.push_back(std::move(profile));
  }
  return profiles;
}

// Smallest request count R such that R independent responses of N distinct
// uniform peers are expected to reach `target` coverage of a population of P:
// (1 - N/P)^R <= 1 - target.
inline std::uint64_t coverage_requests(std::uint64_t population, std::uint64_t per_response,
                                       double target = 0.9) {
  if (per_response < 1 || per_response > population)
    throw config_error("coverage: peers per response must be in [1, population]");
  if (!(target > 0.0 && target < 1.0))
    throw config_error("coverage: target must be in (0, 1)");
  const long double miss =
      1.0L - static_cast<long double>(per_response) / static_cast<long double>(population);
  const long double residue = 1.0L - static_cast<long double>(target);
  if (miss <= 0.0L || miss <= residue) return 1;  // one response already suffices
  auto reached = [&](std::uint64_t r) {
    return std::pow(miss, static_cast<long double>(r)) <= residue;
  };
  std::uint64_t r = static_cast<std::uint64_t>(
      std::ceil(std::log(residue) / std::log(miss)));
  if (r < 1) r = 1;
  while (!reached(r)) ++r;              // guard against rounding down
  while (r > 1 && reached(r - 1)) --r;  // guard against rounding up
  return r;
}

}  // namespace localswarm

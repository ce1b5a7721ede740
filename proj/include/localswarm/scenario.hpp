#pragma once

// Scenario construction: ISP layouts, upload-capacity classes, arrival
// schedules and the on-disk scenario file format.
//
// A scenario is a pure value. Building peer specs from a config is a
// deterministic function of (config, config.rng_seed): rebuilding with the
// same seed yields byte-identical spec lists, which the determinism tests
// rely on.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "localswarm/rng.hpp"

namespace localswarm {

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Upload capacity class: `frac_num/frac_den` of each ISP's peers run at
// `rate` bytes/s. Fractions are exact rationals so "thirds" validate exactly.
struct UploadClass {
  double rate = 0;
  std::uint64_t frac_num = 1;
  std::uint64_t frac_den = 1;
};

enum class PolicyKind : std::uint8_t { bittorrent_random, locality };

struct Policy {
  PolicyKind kind = PolicyKind::bittorrent_random;
  // Locality knobs; ignored for bittorrent_random.
  std::uint64_t limit = 0;       // max outgoing inter-ISP connections per ISP
  bool round_robin = false;      // external pick: round-robin over ISPs vs uniform over peers
  bool partition_merge = false;  // clients may request rescue peers when starved
};

// One simulated peer. `arrival < 0` marks a churn second-set peer that is
// activated dynamically (one per first-set completion) rather than scheduled.
struct PeerSpec {
  std::uint32_t peer = 0;
  std::uint32_t isp = 0;
  double max_upload = 0;
  double arrival = 0;
  bool initial_seed = false;
  std::uint8_t churn_set = 0;  // 0 = first set, 1 = second set
};

constexpr double kSecondSetArrival = -1.0;

struct ScenarioConfig {
  // Population. torrent_size counts first-set leechers; the initial seed is
  // one extra peer on top, living in a pseudo-ISP of its own.
  std::uint32_t torrent_size = 0;
  std::vector<std::uint32_t> isp_counts;  // first-set leechers per ISP
  std::vector<std::string> isp_names;

  // Content. content_size must be an exact multiple of piece_size.
  std::uint64_t content_size = 100'000'000;  // 100 MB, decimal
  std::uint64_t piece_size = 250'000;

  double seed_rate = 20'000;  // initial seed upload, bytes/s
  std::vector<UploadClass> classes{{20'000, 1, 1}};

  Policy policy;
  std::optional<double> egress_cap;  // per-ISP inter-ISP uplink, bytes/s

  double arrival_window = 60;
  double seed_linger = 300;
  std::uint64_t rng_seed = 1;

  // Engine timing knobs (defaults match the reference deployment).
  double announce_interval = 1800;
  double announce_retry = 15;
  double peer_expiry = 2700;
  double pm_t0 = 60;  // partition-merge initial deadline bound
  double pm_t1 = 60;  // tracker-side min spacing of rescue grants per ISP
  std::uint32_t max_peer_set = 80;
  std::uint32_t unchoke_slots = 4;
  std::uint32_t numwant = 80;
  double choke_interval = 10;
  double optimistic_interval = 30;
  std::optional<double> stall_window;  // default: 2 * content_size / seed_rate

  // Churn: size of the second peer set (0 disables). Second-set peers mirror
  // the first set's ISP layout and start one-per-completion.
  std::uint32_t churn_second_set = 0;

  // Partition harness: at partition_time, drop every cross link touching
  // partition_isp and refuse new ones unless PM-initiated from inside it.
  std::optional<std::uint32_t> partition_isp;
  double partition_time = 0;

  std::uint32_t n_isps() const { return static_cast<std::uint32_t>(isp_counts.size()); }
  // The initial seed's pseudo-ISP sits one past the real ISPs.
  std::uint32_t pseudo_isp() const { return n_isps(); }
  std::uint32_t n_peers_total() const { return torrent_size + churn_second_set + 1; }
  std::uint32_t initial_seed_id() const { return torrent_size + churn_second_set; }

  double stall_window_or_default() const {
    if (stall_window) return *stall_window;
    return 2.0 * static_cast<double>(content_size) / seed_rate;
  }

  void validate() const;
  std::string canonical() const;  // stable key=value dump, hashed into manifests
};

inline void ScenarioConfig::validate() const {
  if (torrent_size < 1) throw config_error("torrent_size must be >= 1");
  if (isp_counts.empty()) throw config_error("at least one ISP required");
  if (isp_counts.size() != isp_names.size())
    throw config_error("isp_counts/isp_names size mismatch");
  std::uint64_t sum = 0;
  for (auto c : isp_counts) sum += c;
  if (sum != torrent_size)
    throw config_error("ISP counts sum to " + std::to_string(sum) + ", expected torrent_size " +
                       std::to_string(torrent_size));
  if (piece_size == 0 || content_size == 0 || content_size % piece_size != 0)
    throw config_error("content_size (" + std::to_string(content_size) +
                       ") must be a positive exact multiple of piece_size (" +
                       std::to_string(piece_size) + ")");
  if (seed_rate <= 0) throw config_error("seed_rate must be positive");
  if (classes.empty()) throw config_error("at least one upload class required");
  // Class fractions must sum to exactly 1 (checked in rational arithmetic).
  // sum(num_i/den_i) == 1  <=>  sum(num_i * L/den_i) == L with L = lcm.
  {
    unsigned long long lcm = 1;
    for (const auto& c : classes) {
      if (c.frac_den == 0 || c.rate <= 0)
        throw config_error("upload class needs positive rate and denominator");
      unsigned long long a = lcm, b = c.frac_den;
      while (b) { auto t = a % b; a = b; b = t; }  // gcd in a
      lcm = lcm / a * c.frac_den;
      if (lcm > (1ull << 62)) throw config_error("upload class denominators too large");
    }
    unsigned long long acc = 0;
    for (const auto& c : classes) acc += c.frac_num * (lcm / c.frac_den);
    if (acc != lcm) throw config_error("upload class fractions must sum to exactly 1");
  }
  if (policy.kind == PolicyKind::locality && policy.limit == 0)
    throw config_error("locality policy requires limit >= 1");
  if (egress_cap && *egress_cap < 0) throw config_error("egress_cap must be >= 0");
  if (arrival_window < 0) throw config_error("arrival_window must be >= 0");
  if (seed_linger < 0) throw config_error("seed_linger must be >= 0");
  if (max_peer_set < 1) throw config_error("max_peer_set must be >= 1");
  if (unchoke_slots < 1) throw config_error("unchoke_slots must be >= 1");
  if (choke_interval <= 0 || optimistic_interval <= 0 || announce_interval <= 0 ||
      announce_retry <= 0 || peer_expiry <= 0)
    throw config_error("intervals must be positive");
  if (pm_t0 <= 0 || pm_t1 < 0) throw config_error("pm timers must be positive");
  if (partition_isp && *partition_isp >= n_isps())
    throw config_error("partition_isp out of range");
  if (partition_isp && partition_time < 0)
    throw config_error("partition_time must be >= 0");
}

// ---------------------------------------------------------------------------
// Builders

inline std::vector<std::string> default_isp_names(std::uint32_t n) {
  std::vector<std::string> names;
  names.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) names.push_back("I" + std::to_string(i));
  return names;
}

// Even split of n_peers across n_isps, single upload class.
inline ScenarioConfig build_homogeneous(std::uint32_t n_peers, std::uint32_t n_isps,
                                        double upload_rate) {
  if (n_isps == 0) throw config_error("need at least one ISP");
  if (n_peers == 0 || n_peers % n_isps != 0)
    throw config_error("peer count " + std::to_string(n_peers) + " is not divisible by " +
                       std::to_string(n_isps) + " ISPs");
  ScenarioConfig cfg;
  cfg.torrent_size = n_peers;
  cfg.isp_counts.assign(n_isps, n_peers / n_isps);
  cfg.isp_names = default_isp_names(n_isps);
  cfg.classes = {{upload_rate, 1, 1}};
  cfg.seed_rate = upload_rate;
  cfg.validate();
  return cfg;
}

// Equal thirds of 20/50/100 kB/s per ISP; 100 kB/s initial seed.
inline ScenarioConfig build_heterogeneous(std::uint32_t n_peers, std::uint32_t n_isps) {
  if (n_isps == 0) throw config_error("need at least one ISP");
  if (n_peers == 0 || n_peers % n_isps != 0)
    throw config_error("peer count " + std::to_string(n_peers) + " is not divisible by " +
                       std::to_string(n_isps) + " ISPs");
  if ((n_peers / n_isps) % 3 != 0)
    throw config_error("per-ISP count " + std::to_string(n_peers / n_isps) +
                       " is not divisible into three equal rate classes");
  ScenarioConfig cfg;
  cfg.torrent_size = n_peers;
  cfg.isp_counts.assign(n_isps, n_peers / n_isps);
  cfg.isp_names = default_isp_names(n_isps);
  cfg.classes = {{20'000, 1, 3}, {50'000, 1, 3}, {100'000, 1, 3}};
  cfg.seed_rate = 100'000;
  cfg.validate();
  return cfg;
}

// Explicit per-AS population (e.g. from a crawl profile), single class.
inline ScenarioConfig build_from_distribution(
    const std::vector<std::pair<std::string, std::uint32_t>>& as_counts, double upload_rate) {
  if (as_counts.empty()) throw config_error("distribution must list at least one AS");
  ScenarioConfig cfg;
  std::uint64_t total = 0;
  for (const auto& [name, count] : as_counts) {
    if (count == 0) throw config_error("AS " + name + " has zero peers");
    cfg.isp_names.push_back(name);
    cfg.isp_counts.push_back(count);
    total += count;
  }
  if (total > 0xffffffffull) throw config_error("too many peers");
  cfg.torrent_size = static_cast<std::uint32_t>(total);
  cfg.classes = {{upload_rate, 1, 1}};
  cfg.seed_rate = upload_rate;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Peer spec materialization

// Exact largest-remainder apportionment of `n` slots to the class fractions.
inline std::vector<std::uint32_t> apportion_classes(const std::vector<UploadClass>& classes,
                                                    std::uint32_t n) {
  std::vector<std::uint32_t> counts(classes.size(), 0);
  std::vector<std::pair<double, std::size_t>> rema;
  std::uint64_t assigned = 0;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    unsigned long long whole = static_cast<unsigned long long>(n) * classes[i].frac_num;
    counts[i] = static_cast<std::uint32_t>(whole / classes[i].frac_den);
    assigned += counts[i];
    double rem = static_cast<double>(whole % classes[i].frac_den) / classes[i].frac_den;
    rema.push_back({-rem, i});  // sort ascending => largest remainder first
  }
  std::sort(rema.begin(), rema.end());
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) counts[rema[k % rema.size()].second]++;
  return counts;
}

// Materialize the full peer list. Draw order is fixed (initial seed, then
// first set in id order) so rebuilds are byte-identical. Second-set arrivals
// are the kSecondSetArrival sentinel: the engine activates one second-set
// peer per first-set completion.
inline std::vector<PeerSpec> build_peer_specs(const ScenarioConfig& cfg, double window) {
  cfg.validate();
  Rng rng(cfg.rng_seed, /*stream=*/1);
  std::vector<PeerSpec> specs;
  specs.reserve(cfg.n_peers_total());

  PeerSpec seed;
  seed.peer = cfg.initial_seed_id();
  seed.isp = cfg.pseudo_isp();
  seed.max_upload = cfg.seed_rate;
  seed.arrival = window > 0 ? rng.uniform(0, window) : 0.0;
  seed.initial_seed = true;

  std::uint32_t id = 0;
  std::vector<std::pair<std::uint32_t, double>> pattern;  // (isp, rate) in id order
  for (std::uint32_t isp = 0; isp < cfg.n_isps(); ++isp) {
    const std::uint32_t n = cfg.isp_counts[isp];
    auto class_counts = apportion_classes(cfg.classes, n);
    std::size_t cls = 0;
    for (std::uint32_t k = 0; k < n; ++k, ++id) {
      // Cycle through classes with remaining quota so classes interleave
      // in id order instead of forming blocks.
      std::size_t tries = 0;
      while (class_counts[cls] == 0 && tries++ < class_counts.size())
        cls = (cls + 1) % class_counts.size();
      class_counts[cls]--;
      PeerSpec p;
      p.peer = id;
      p.isp = isp;
      p.max_upload = cfg.classes[cls].rate;
      p.churn_set = 0;
      p.arrival = window > 0 ? rng.uniform(0, window) : 0.0;
      specs.push_back(p);
      pattern.emplace_back(p.isp, p.max_upload);
      cls = (cls + 1) % class_counts.size();
    }
  }
  // The second set replays the first set's (ISP, class) pattern cyclically:
  // peer torrent_size + j mirrors peer j % torrent_size.
  for (std::uint32_t j = 0; j < cfg.churn_second_set; ++j, ++id) {
    const auto& [isp, rate] = pattern[j % pattern.size()];
    PeerSpec p;
    p.peer = id;
    p.isp = isp;
    p.max_upload = rate;
    p.churn_set = 1;
    p.arrival = kSecondSetArrival;
    specs.push_back(p);
  }
  specs.push_back(seed);
  return specs;
}

inline std::vector<PeerSpec> build_peer_specs(const ScenarioConfig& cfg) {
  return build_peer_specs(cfg, cfg.arrival_window);
}

// Churn schedule: first set uniform in [0, window], second set activated
// one-per-completion. Requires churn to be enabled in the config.
inline std::vector<PeerSpec> churn_schedule(const ScenarioConfig& cfg, double window) {
  if (cfg.churn_second_set == 0) throw config_error("churn_schedule: churn disabled in config");
  if (window <= 0) throw config_error("churn_schedule: window must be positive");
  return build_peer_specs(cfg, window);
}

// ---------------------------------------------------------------------------
// Canonical serialization (manifest hashing) and the scenario file format.

inline std::string ScenarioConfig::canonical() const {
  std::ostringstream o;
  o << "torrent_size=" << torrent_size << '\n';
  o << "isp_counts=";
  for (std::size_t i = 0; i < isp_counts.size(); ++i)
    o << (i ? "," : "") << isp_names[i] << ':' << isp_counts[i];
  o << '\n';
  o << "content_size=" << content_size << '\n';
  o << "piece_size=" << piece_size << '\n';
  o << "seed_rate=" << seed_rate << '\n';
  o << "classes=";
  for (std::size_t i = 0; i < classes.size(); ++i)
    o << (i ? "," : "") << classes[i].rate << ':' << classes[i].frac_num << '/'
      << classes[i].frac_den;
  o << '\n';
  o << "policy=" << (policy.kind == PolicyKind::locality ? "locality" : "random") << '\n';
  if (policy.kind == PolicyKind::locality) {
    o << "limit=" << policy.limit << '\n';
    o << "rr=" << (policy.round_robin ? 1 : 0) << '\n';
    o << "pm=" << (policy.partition_merge ? 1 : 0) << '\n';
  }
  if (egress_cap) o << "egress_cap=" << *egress_cap << '\n';
  o << "arrival_window=" << arrival_window << '\n';
  o << "seed_linger=" << seed_linger << '\n';
  o << "rng_seed=" << rng_seed << '\n';
  o << "announce_interval=" << announce_interval << '\n';
  o << "announce_retry=" << announce_retry << '\n';
  o << "peer_expiry=" << peer_expiry << '\n';
  o << "pm_t0=" << pm_t0 << '\n';
  o << "pm_t1=" << pm_t1 << '\n';
  o << "max_peer_set=" << max_peer_set << '\n';
  o << "unchoke_slots=" << unchoke_slots << '\n';
  o << "numwant=" << numwant << '\n';
  o << "choke_interval=" << choke_interval << '\n';
  o << "optimistic_interval=" << optimistic_interval << '\n';
  if (stall_window) o << "stall_window=" << *stall_window << '\n';
  if (churn_second_set) o << "churn_second_set=" << churn_second_set << '\n';
  if (partition_isp) {
    o << "partition_isp=" << *partition_isp << '\n';
    o << "partition_time=" << partition_time << '\n';
  }
  return o.str();
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline double parse_num(const std::string& v, const std::string& key, int line) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (...) {
    throw config_error("line " + std::to_string(line) + ": bad numeric value '" + v + "' for " +
                       key);
  }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key, int line) {
  try {
    std::size_t pos = 0;
    unsigned long long u = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return u;
  } catch (...) {
    throw config_error("line " + std::to_string(line) + ": bad integer value '" + v + "' for " +
                       key);
  }
}

inline bool parse_bool(const std::string& v, const std::string& key, int line) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw config_error("line " + std::to_string(line) + ": bad flag '" + v + "' for " + key +
                     " (use on/off)");
}

}  // namespace detail

// Parse the key = value scenario format. Unknown keys are errors (typos must
// not silently change a run). `sweep_*` keys belong to the sweep layer and
// are skipped here.
inline ScenarioConfig parse_scenario(const std::string& text) {
  using namespace detail;
  ScenarioConfig cfg;
  cfg.classes.clear();
  std::optional<std::uint32_t> n_isps_even;
  bool saw_peers = false;

  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string s = trim(raw);
    if (s.empty() || s[0] == '#') continue;
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw config_error("line " + std::to_string(line) + ": expected key = value");
    std::string key = trim(s.substr(0, eq));
    std::string val = trim(s.substr(eq + 1));
    if (key.rfind("sweep_", 0) == 0) continue;

    if (key == "peers") {
      cfg.torrent_size = static_cast<std::uint32_t>(parse_u64(val, key, line));
      saw_peers = true;
    } else if (key == "isps") {
      n_isps_even = static_cast<std::uint32_t>(parse_u64(val, key, line));
    } else if (key == "isp_counts") {
      for (const auto& item : split(val, ',')) {
        auto colon = item.find(':');
        if (colon == std::string::npos)
          throw config_error("line " + std::to_string(line) + ": isp_counts wants name:count");
        cfg.isp_names.push_back(trim(item.substr(0, colon)));
        cfg.isp_counts.push_back(
            static_cast<std::uint32_t>(parse_u64(trim(item.substr(colon + 1)), key, line)));
      }
    } else if (key == "content") {
      cfg.content_size = parse_u64(val, key, line);
    } else if (key == "piece") {
      cfg.piece_size = parse_u64(val, key, line);
    } else if (key == "seed_rate") {
      cfg.seed_rate = parse_num(val, key, line);
    } else if (key == "upload") {
      for (const auto& item : split(val, ',')) {
        UploadClass c;
        auto colon = item.find(':');
        if (colon == std::string::npos) {
          c.rate = parse_num(item, key, line);
        } else {
          c.rate = parse_num(trim(item.substr(0, colon)), key, line);
          std::string frac = trim(item.substr(colon + 1));
          auto slash = frac.find('/');
          if (slash == std::string::npos) {
            c.frac_num = parse_u64(frac, key, line);
          } else {
            c.frac_num = parse_u64(trim(frac.substr(0, slash)), key, line);
            c.frac_den = parse_u64(trim(frac.substr(slash + 1)), key, line);
          }
        }
        cfg.classes.push_back(c);
      }
    } else if (key == "policy") {
      if (val == "random" || val == "bittorrent" || val == "bittorrent_random")
        cfg.policy.kind = PolicyKind::bittorrent_random;
      else if (val == "locality")
        cfg.policy.kind = PolicyKind::locality;
      else
        throw config_error("line " + std::to_string(line) +
                           ": policy must be 'random' or 'locality'");
    } else if (key == "limit") {
      cfg.policy.limit = parse_u64(val, key, line);
    } else if (key == "rr") {
      cfg.policy.round_robin = parse_bool(val, key, line);
    } else if (key == "pm") {
      cfg.policy.partition_merge = parse_bool(val, key, line);
    } else if (key == "egress_cap") {
      cfg.egress_cap = parse_num(val, key, line);
    } else if (key == "arrival_window") {
      cfg.arrival_window = parse_num(val, key, line);
    } else if (key == "seed_linger") {
      cfg.seed_linger = parse_num(val, key, line);
    } else if (key == "seed") {
      cfg.rng_seed = parse_u64(val, key, line);
    } else if (key == "announce_interval") {
      cfg.announce_interval = parse_num(val, key, line);
    } else if (key == "announce_retry") {
      cfg.announce_retry = parse_num(val, key, line);
    } else if (key == "expiry") {
      cfg.peer_expiry = parse_num(val, key, line);
    } else if (key == "pm_t0") {
      cfg.pm_t0 = parse_num(val, key, line);
    } else if (key == "pm_t1") {
      cfg.pm_t1 = parse_num(val, key, line);
    } else if (key == "max_peer_set") {
      cfg.max_peer_set = static_cast<std::uint32_t>(parse_u64(val, key, line));
    } else if (key == "unchoke_slots") {
      cfg.unchoke_slots = static_cast<std::uint32_t>(parse_u64(val, key, line));
    } else if (key == "numwant") {
      cfg.numwant = static_cast<std::uint32_t>(parse_u64(val, key, line));
    } else if (key == "choke_interval") {
      cfg.choke_interval = parse_num(val, key, line);
    } else if (key == "optimistic_interval") {
      cfg.optimistic_interval = parse_num(val, key, line);
    } else if (key == "stall_window") {
      cfg.stall_window = parse_num(val, key, line);
    } else if (key == "churn_second_set") {
      cfg.churn_second_set = static_cast<std::uint32_t>(parse_u64(val, key, line));
    } else if (key == "partition_isp") {
      cfg.partition_isp = static_cast<std::uint32_t>(parse_u64(val, key, line));
    } else if (key == "partition_time") {
      cfg.partition_time = parse_num(val, key, line);
    } else {
      throw config_error("line " + std::to_string(line) + ": unknown key '" + key + "'");
    }
  }

  if (cfg.classes.empty()) cfg.classes = {{20'000, 1, 1}};
  if (n_isps_even) {
    if (!cfg.isp_counts.empty())
      throw config_error("give either 'isps' or 'isp_counts', not both");
    if (!saw_peers) throw config_error("'isps' requires 'peers'");
    if (*n_isps_even == 0 || cfg.torrent_size % *n_isps_even != 0)
      throw config_error("peers (" + std::to_string(cfg.torrent_size) +
                         ") not divisible by isps (" + std::to_string(*n_isps_even) + ")");
    cfg.isp_counts.assign(*n_isps_even, cfg.torrent_size / *n_isps_even);
    cfg.isp_names = default_isp_names(*n_isps_even);
  } else if (!cfg.isp_counts.empty() && !saw_peers) {
    std::uint64_t total = 0;
    for (auto c : cfg.isp_counts) total += c;
    cfg.torrent_size = static_cast<std::uint32_t>(total);
  }
  cfg.validate();
  return cfg;
}

}  // namespace localswarm

#pragma once
// Deterministic discrete-event swarm engine with fluid-flow transfers.
//
// Rates: each uploader splits its capacity equally over its active transfers;
// per ISP, if the summed rate of cross-ISP transfers exceeds the egress cap,
// those transfers scale down proportionally (intra-ISP traffic is never
// scaled, and lost external capacity is not redistributed). Between events
// rates are constant, so piece completions are exact. For capped ISPs the
// engine integrates the scale factor over time (W = ∫f dt); a transfer with
// constant uploader share then accrues share·ΔW bytes exactly, no matter how
// often the factor moves, and only the earliest external completion per ISP
// needs a scheduled event.
//
// Byte accounting is exact by reconciliation: each (downloader, piece) keeps
// an integer ledgered-bytes counter; aborted transfers materialize the floor
// of their fluid progress, and the completing transfer writes exactly
// piece_size minus what earlier records carried.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <string>
#include <unordered_map>
#include <vector>

#include "localswarm/ledger.hpp"
#include "localswarm/rng.hpp"
#include "localswarm/scenario.hpp"
#include "localswarm/tracker.hpp"

namespace localswarm {

// ---------------------------------------------------------------------------
// Reference rate allocator: the pure two-stage rule the engine must agree
// with at every instant. Returns one rate per transfer, in input order.
struct RateEntry {
  std::uint32_t uploader = 0;
  std::uint32_t downloader = 0;
};

inline std::vector<double> allocate_rates(const std::vector<RateEntry>& transfers,
                                          const std::vector<double>& max_upload,
                                          const std::vector<std::uint32_t>& isp_of,
                                          std::optional<double> egress_cap,
                                          std::uint32_t n_real_isps) {
  std::vector<std::uint32_t> active(max_upload.size(), 0);
  for (const RateEntry& t : transfers) ++active[t.uploader];
  std::vector<double> share(transfers.size(), 0.0);
  std::vector<double> demand(n_real_isps, 0.0);
  for (std::size_t i = 0; i < transfers.size(); ++i) {
    const RateEntry& t = transfers[i];
    share[i] = max_upload[t.uploader] / static_cast<double>(active[t.uploader]);
    const std::uint32_t src = isp_of[t.uploader];
    if (egress_cap && src < n_real_isps && src != isp_of[t.downloader]) demand[src] += share[i];
  }
  if (!egress_cap) return share;
  std::vector<double> factor(n_real_isps, 1.0);
  for (std::uint32_t i = 0; i < n_real_isps; ++i)
    if (demand[i] > *egress_cap) factor[i] = *egress_cap / demand[i];
  for (std::size_t i = 0; i < transfers.size(); ++i) {
    const std::uint32_t src = isp_of[transfers[i].uploader];
    if (src < n_real_isps && src != isp_of[transfers[i].downloader]) share[i] *= factor[src];
  }
  return share;
}

struct RunStats {
  std::uint64_t announces = 0;
  std::uint64_t external_grants = 0;     // tracker said yes
  std::uint64_t externals_connected = 0; // and the link was established
  std::uint64_t pm_requests = 0;
  std::uint64_t pm_grants = 0;
  std::uint64_t evictions = 0;
  std::uint64_t refused_connects = 0;
  std::uint64_t pieces_completed = 0;
  std::uint64_t events_processed = 0;
};

struct RunResult {
  TransferLedger ledger;
  std::vector<CompletionRecord> completions;
  bool aborted = false;
  std::string abort_reason;
  std::vector<std::uint32_t> partitioned_isps;
  RunStats stats;
  double end_time = 0.0;
  double mean_max_upload = 0.0;  // over peers that joined the run, minus the initial seed
};

class SwarmSim {
 public:
  // ---- construction -------------------------------------------------------
  explicit SwarmSim(const ScenarioConfig& cfg)
      : cfg_(validated(cfg)),
        n_pieces_(static_cast<std::uint32_t>(cfg.content_size / cfg.piece_size)),
        words_((n_pieces_ + 63) / 64),
        tracker_(Tracker::params_from(cfg), Rng(cfg.rng_seed, 1)),
        rng_(cfg.rng_seed, 2) {
    const std::vector<PeerSpec> specs = build_peer_specs(cfg_);
    peers_.resize(specs.size());
    isp_members_.resize(cfg_.n_isps() + 1);
    std::vector<int> isp_map(specs.size());
    for (const PeerSpec& s : specs) {
      Peer& p = peers_[s.peer];
      p.id = s.peer;
      p.isp = s.isp;
      p.max_upload = s.max_upload;
      p.initial_seed = s.initial_seed;
      p.churn_set = s.churn_set;
      p.arrival_cfg = s.arrival;
      p.have.assign(words_, 0);
      p.inflight.assign(words_, 0);
      p.rarity.assign(n_pieces_, 0);
      if (s.initial_seed) {
        for (std::uint32_t i = 0; i < n_pieces_; ++i) p.have[i >> 6] |= 1ull << (i & 63);
        p.have_count = n_pieces_;
      }
      isp_members_[s.isp].push_back(s.peer);
      isp_map[s.peer] = static_cast<int>(s.isp);
    }
    result_.ledger.set_peer_isp(isp_map);
    n_leechers_ = cfg_.torrent_size + cfg_.churn_second_set;
    if (cfg_.egress_cap) flows_.resize(cfg_.n_isps());

    // The initial seed joins at t=0; first-set leechers at their drawn times;
    // second-set peers wait for completions.
    push(0.0, EvKind::arrival, cfg_.initial_seed_id(), 0);
    for (const PeerSpec& s : specs)
      if (!s.initial_seed && s.arrival >= 0.0) push(s.arrival, EvKind::arrival, s.peer, 0);
    if (cfg_.partition_isp) push(cfg_.partition_time, EvKind::partition, 0, 0);
  }

  // ---- public driving -----------------------------------------------------
  // Process one event; false when the run is over (or aborted).
  bool step() {
    if (done_) return false;
    if (completions_ == n_leechers_ && departures_ == n_leechers_) return finish(now_);
    while (!queue_.empty()) {
      const Event e = queue_.top();
      // Stalls only matter while someone still needs bytes; the seed-linger
      // tail after the last completion is legitimately quiet.
      if (completions_ < n_leechers_ &&
          e.time - last_progress_ > cfg_.stall_window_or_default())
        return stall_abort(e.time);
      queue_.pop();
      now_ = std::max(now_, e.time);
      if (!dispatch(e)) continue;  // stale event: keep pulling within this step
      ++result_.stats.events_processed;
      if (completions_ == n_leechers_ && departures_ == n_leechers_) return finish(now_);
      return true;
    }
    return abort_run(now_, "event queue drained before all leechers finished");
  }

  RunResult take_result() {
    while (step()) {
    }
    return std::move(result_);
  }

  static RunResult run(const ScenarioConfig& cfg) { return SwarmSim(cfg).take_result(); }

  double now() const { return now_; }
  bool finished() const { return done_; }

  // ---- white-box state (tests inspect these) ------------------------------
  struct Neighbor {
    std::uint32_t count_needed = 0;  // pieces they have that I lack
    bool i_interested = false;       // me -> them, after the selection override
    bool they_interested = false;    // mirror of their flag toward me
    bool i_unchoke = false;          // I currently unchoke them
    bool they_unchoke = false;
    bool override_uninterested = false;  // piece selection came up empty
    std::uint32_t transfer_in = kNone;   // them -> me, active
    std::uint32_t transfer_out = kNone;  // me -> them, active
    double cum_received = 0.0;           // fluid bytes received from them
    double rate_snapshot = 0.0;          // cum_received at my previous choke round
  };

  struct Partial {
    double done = 0.0;          // fluid bytes of this piece already downloaded
    std::uint64_t ledgered = 0; // integer bytes already written to the ledger
  };

  struct Peer {
    std::uint32_t id = 0;
    std::uint32_t isp = 0;
    double max_upload = 0.0;
    bool initial_seed = false;
    std::uint8_t churn_set = 0;
    double arrival_cfg = 0.0;

    bool active = false;
    bool departed = false;
    double arrival = 0.0;
    std::vector<std::uint64_t> have;
    std::uint32_t have_count = 0;
    std::vector<std::uint64_t> inflight;  // pieces currently downloading (bitset)
    std::unordered_map<std::uint32_t, Neighbor> nbrs;
    std::vector<std::uint32_t> nbr_order;  // deterministic iteration order
    std::vector<std::uint16_t> rarity;     // per piece: holders among my neighbors
    std::uint64_t needed_visible = 0;      // sum of count_needed over neighbors

    std::vector<std::uint32_t> regular;         // current by-rate unchokes
    std::uint32_t optimistic = kNone;
    std::uint32_t seed_cursor = 0;              // id watermark for seed rotation
    std::vector<std::uint32_t> outbound;        // active transfers I upload
    std::unordered_map<std::uint32_t, Partial> partial;  // piece -> progress

    double retry = 0.0;  // current announce back-off
    std::uint64_t announce_ver = 0;
    double pm_T = 0.0;
    bool pm_armed = false;
    std::uint64_t pm_ver = 0;

    double completion_time = -1.0;

    bool complete(std::uint32_t n_pieces) const { return have_count == n_pieces; }
    bool has(std::uint32_t piece) const { return (have[piece >> 6] >> (piece & 63)) & 1; }
  };

  struct Transfer {
    std::uint32_t uploader = 0;
    std::uint32_t downloader = 0;
    std::uint32_t piece = 0;
    std::uint64_t ver = 0;
    bool active = false;
    bool capped = false;  // cross-ISP from an egress-capped real ISP
    double need = 0.0;    // bytes left at `base`
    double base = 0.0;    // time (uncapped) or source-ISP W integral (capped)
    double share = 0.0;   // uploader equal-split rate, before egress scaling
  };

  static constexpr std::uint32_t kNone = 0xffffffffu;

  const std::vector<Peer>& peers() const { return peers_; }
  const std::vector<Transfer>& transfers() const { return transfers_; }
  const Tracker& tracker() const { return tracker_; }
  const RunStats& stats() const { return result_.stats; }

  double current_rate(const Transfer& t) const {
    return t.share * (t.capped ? flows_[peers_[t.uploader].isp].f : 1.0);
  }

  // Engine rates == the pure allocator, at this instant.
  bool audit_rates(double tol = 1e-9, std::string* why = nullptr) const {
    std::vector<RateEntry> entries;
    std::vector<const Transfer*> live;
    for (const Transfer& t : transfers_)
      if (t.active) {
        entries.push_back({t.uploader, t.downloader});
        live.push_back(&t);
      }
    std::vector<double> caps(peers_.size());
    std::vector<std::uint32_t> isps(peers_.size());
    for (const Peer& p : peers_) {
      caps[p.id] = p.max_upload;
      isps[p.id] = p.isp;
    }
    const std::vector<double> want =
        allocate_rates(entries, caps, isps, cfg_.egress_cap, cfg_.n_isps());
    for (std::size_t i = 0; i < live.size(); ++i) {
      const double got = current_rate(*live[i]);
      if (std::abs(got - want[i]) > tol * std::max(1.0, want[i])) {
        if (why) {
          const Transfer& t = *live[i];
          *why = "transfer " + std::to_string(t.uploader) + "->" +
                 std::to_string(t.downloader) + " piece " + std::to_string(t.piece) +
                 ": engine " + std::to_string(got) + " allocator " + std::to_string(want[i]) +
                 " (share " + std::to_string(t.share) +
                 (t.capped ? ", capped f " + std::to_string(flows_[peers_[t.uploader].isp].f)
                           : std::string(", uncapped")) +
                 ", uploader outbound " +
                 std::to_string(peers_[t.uploader].outbound.size()) + ")";
        }
        return false;
      }
    }
    return true;
  }

  bool audit_symmetry() const {
    for (const Peer& p : peers_)
      for (std::uint32_t b : p.nbr_order) {
        const Peer& q = peers_[b];
        if (!q.nbrs.count(p.id)) return false;
      }
    return true;
  }

  // Recompute count_needed / rarity / needed_visible from bitfields.
  bool audit_counts() const {
    for (const Peer& p : peers_) {
      std::uint64_t visible = 0;
      std::vector<std::uint16_t> rarity(n_pieces_, 0);
      for (std::uint32_t b : p.nbr_order) {
        const Peer& q = peers_[b];
        std::uint32_t cnt = 0;
        for (std::uint32_t w = 0; w < words_; ++w)
          cnt += static_cast<std::uint32_t>(__builtin_popcountll(q.have[w] & ~p.have[w]));
        if (p.nbrs.at(b).count_needed != cnt) return false;
        visible += cnt;
        for (std::uint32_t piece = 0; piece < n_pieces_; ++piece)
          if (q.has(piece)) ++rarity[piece];
      }
      if (p.needed_visible != visible) return false;
      for (std::uint32_t piece = 0; piece < n_pieces_; ++piece)
        if (p.rarity[piece] != rarity[piece]) return false;
    }
    return true;
  }

 private:
  static const ScenarioConfig& validated(const ScenarioConfig& cfg) {
    cfg.validate();
    return cfg;
  }

  // ---- events -------------------------------------------------------------
  enum class EvKind : std::uint8_t {
    arrival = 0,
    pm_check = 1,
    announce = 2,
    piece_done = 3,
    isp_done = 4,
    choke_round = 5,
    optimistic_round = 6,
    departure = 7,
    partition = 8,
  };

  struct Event {
    double time;
    EvKind kind;
    std::uint32_t subject;
    std::uint64_t ver;
    std::uint64_t seq;
    bool operator>(const Event& o) const {
      if (time != o.time) return time > o.time;
      if (kind != o.kind) return kind > o.kind;
      if (subject != o.subject) return subject > o.subject;
      return seq > o.seq;
    }
  };

  void push(double time, EvKind kind, std::uint32_t subject, std::uint64_t ver) {
    queue_.push({time, kind, subject, ver, seq_++});
  }

  bool dispatch(const Event& e) {
    switch (e.kind) {
      case EvKind::arrival: return on_arrival(e.subject, e.time);
      case EvKind::pm_check: return on_pm_check(e.subject, e.ver, e.time);
      case EvKind::announce: return on_announce_due(e.subject, e.ver, e.time);
      case EvKind::piece_done: return on_piece_done(e.subject, e.ver, e.time);
      case EvKind::isp_done: return on_isp_done(e.subject, e.time);
      case EvKind::choke_round: return on_choke_round(e.subject, e.time);
      case EvKind::optimistic_round: return on_optimistic_round(e.subject, e.time);
      case EvKind::departure: return on_departure(e.subject, e.time);
      case EvKind::partition: return on_partition(e.time);
    }
    return false;
  }

  // ---- per-ISP egress flow accounting --------------------------------------
  struct IspFlow {
    double demand = 0.0;  // sum of shares of active capped transfers
    double f = 1.0;       // current scale factor
    double W = 0.0;       // integral of f over time
    double t_last = 0.0;
    double rep_time = std::numeric_limits<double>::infinity();  // scheduled rep event
    // Earliest-completion index: (W target, transfer id, transfer version).
    struct Entry {
      double target;
      std::uint32_t tid;
      std::uint64_t ver;
      bool operator>(const Entry& o) const {
        if (target != o.target) return target > o.target;
        return tid > o.tid;
      }
    };
    std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> heap;
  };

  void flow_advance(IspFlow& fl, double now) {
    fl.W += fl.f * (now - fl.t_last);
    fl.t_last = now;
  }

  double flow_w_at(const IspFlow& fl, double now) const {
    return fl.W + fl.f * (now - fl.t_last);
  }

  void flow_refresh(std::uint32_t isp, double now) {
    IspFlow& fl = flows_[isp];
    flow_advance(fl, now);
    fl.f = (fl.demand > *cfg_.egress_cap) ? *cfg_.egress_cap / fl.demand : 1.0;
    flow_need_rep(isp, now);
  }

  void flow_need_rep(std::uint32_t isp, double now) {
    IspFlow& fl = flows_[isp];
    while (!fl.heap.empty()) {
      const IspFlow::Entry& top = fl.heap.top();
      const Transfer& t = transfers_[top.tid];
      if (t.active && t.ver == top.ver) break;
      fl.heap.pop();
    }
    if (fl.heap.empty()) return;
    const double want = now + (fl.heap.top().target - flow_w_at(fl, now)) / fl.f;
    if (want < fl.rep_time - 1e-12) {
      fl.rep_time = want;
      push(std::max(want, now), EvKind::isp_done, isp, 0);
    }
  }

  // ---- transfer bookkeeping -------------------------------------------------
  void touch(Transfer& t, double now) {
    double delta;
    if (t.capped) {
      IspFlow& fl = flows_[peers_[t.uploader].isp];
      flow_advance(fl, now);
      delta = t.share * (fl.W - t.base);
      t.base = fl.W;
    } else {
      delta = t.share * (now - t.base);
      t.base = now;
    }
    if (delta > t.need) delta = t.need;
    if (delta > 0.0) {
      t.need -= delta;
      Peer& d = peers_[t.downloader];
      d.nbrs[t.uploader].cum_received += delta;
      d.partial[t.piece].done += delta;
    }
  }

  double live_received(const Peer& owner, std::uint32_t from, double now) const {
    const Neighbor& nb = owner.nbrs.at(from);
    double live = nb.cum_received;
    if (nb.transfer_in != kNone) {
      const Transfer& t = transfers_[nb.transfer_in];
      double delta = t.capped
                         ? t.share * (flow_w_at(flows_[peers_[t.uploader].isp], now) - t.base)
                         : t.share * (now - t.base);
      live += std::min(delta, t.need);
    }
    return live;
  }

  void reschedule(Transfer& t, std::uint32_t tid, double now) {
    ++t.ver;
    if (t.share <= 0.0) return;
    if (t.capped) {
      IspFlow& fl = flows_[peers_[t.uploader].isp];
      fl.heap.push({t.base + t.need / t.share, tid, t.ver});
      // The representative event is refreshed by the caller via flow_refresh.
    } else {
      push(now + t.need / t.share, EvKind::piece_done, tid, t.ver);
    }
  }

  // Re-split the uploader's capacity and reschedule its transfers.
  void refresh_uploader(std::uint32_t up, double now) {
    Peer& u = peers_[up];
    const double share =
        u.outbound.empty() ? 0.0 : u.max_upload / static_cast<double>(u.outbound.size());
    bool any_capped = false;
    for (std::uint32_t tid : u.outbound) {
      Transfer& t = transfers_[tid];
      touch(t, now);
      if (t.capped) {
        flows_[u.isp].demand += share - t.share;
        any_capped = true;
      }
      t.share = share;
      reschedule(t, tid, now);
    }
    if (any_capped) flow_refresh(u.isp, now);
  }

  std::uint32_t alloc_transfer() {
    if (!free_transfers_.empty()) {
      const std::uint32_t tid = free_transfers_.back();
      free_transfers_.pop_back();
      return tid;
    }
    transfers_.push_back({});
    return static_cast<std::uint32_t>(transfers_.size() - 1);
  }

  void add_transfer(std::uint32_t up, std::uint32_t down, std::uint32_t piece, double now) {
    Peer& u = peers_[up];
    Peer& d = peers_[down];
    const std::uint32_t tid = alloc_transfer();
    Transfer& t = transfers_[tid];
    t.uploader = up;
    t.downloader = down;
    t.piece = piece;
    t.active = true;
    t.capped = cfg_.egress_cap.has_value() && u.isp < cfg_.n_isps() && u.isp != d.isp;
    const Partial& part = d.partial[piece];  // creates {0,0} on first touch
    t.need = static_cast<double>(cfg_.piece_size) - part.done;
    if (t.need < 0.0) t.need = 0.0;
    if (t.capped) {
      IspFlow& fl = flows_[u.isp];
      flow_advance(fl, now);
      t.base = fl.W;
    } else {
      t.base = now;
    }
    t.share = 0.0;
    u.outbound.push_back(tid);
    u.nbrs[down].transfer_out = tid;
    d.nbrs[up].transfer_in = tid;
    d.inflight[piece >> 6] |= 1ull << (piece & 63);
    refresh_uploader(up, now);
  }

  void detach_transfer(std::uint32_t tid) {
    Transfer& t = transfers_[tid];
    Peer& u = peers_[t.uploader];
    Peer& d = peers_[t.downloader];
    u.outbound.erase(std::find(u.outbound.begin(), u.outbound.end(), tid));
    u.nbrs[t.downloader].transfer_out = kNone;
    d.nbrs[t.uploader].transfer_in = kNone;
    d.inflight[t.piece >> 6] &= ~(1ull << (t.piece & 63));
    if (t.capped) flows_[u.isp].demand -= t.share;
    t.active = false;
    ++t.ver;
    free_transfers_.push_back(tid);
  }

  // Abort mid-piece: materialize the fluid progress into an integer record.
  void abort_transfer(std::uint32_t tid, double now, bool refresh_up) {
    Transfer& t = transfers_[tid];
    touch(t, now);
    Peer& d = peers_[t.downloader];
    Partial& part = d.partial[t.piece];
    const auto whole = static_cast<std::uint64_t>(part.done);
    if (whole > part.ledgered) {
      result_.ledger.add(now, static_cast<int>(t.uploader), static_cast<int>(t.downloader),
                         whole - part.ledgered);
      part.ledgered = whole;
      last_progress_ = now;
    }
    if (part.done <= 0.0 && part.ledgered == 0) d.partial.erase(t.piece);
    const std::uint32_t up = t.uploader;
    const std::uint32_t down = t.downloader;
    detach_transfer(tid);
    if (refresh_up) refresh_uploader(up, now);
    // The detach may have dropped this ISP's external demand: re-derive the
    // scale factor now, not at the next uploader touch.
    if (cfg_.egress_cap && peers_[up].isp < cfg_.n_isps()) flow_refresh(peers_[up].isp, now);
    inflight_changed(down, now);
  }

  void complete_piece(std::uint32_t tid, double now) {
    Transfer& t = transfers_[tid];
    touch(t, now);
    const std::uint32_t up = t.uploader;
    const std::uint32_t down = t.downloader;
    const std::uint32_t piece = t.piece;
    Peer& d = peers_[down];
    Partial& part = d.partial[piece];
    const std::uint64_t chunk = cfg_.piece_size - part.ledgered;
    if (chunk > 0)
      result_.ledger.add(now, static_cast<int>(up), static_cast<int>(down), chunk);
    last_progress_ = now;
    ++result_.stats.pieces_completed;
    d.partial.erase(piece);
    detach_transfer(tid);
    set_have(down, piece, now);
    // Same link, next piece — the slot stays warm if interest survives.
    if (!d.departed && peers_[up].nbrs.count(down) && peers_[up].nbrs[down].i_unchoke)
      try_start(up, down, now);
    refresh_uploader(up, now);
    if (cfg_.egress_cap && peers_[up].isp < cfg_.n_isps()) flow_refresh(peers_[up].isp, now);
    inflight_changed(down, now);
  }

  // ---- piece / interest bookkeeping ----------------------------------------
  void refresh_interest(std::uint32_t a, std::uint32_t b, double now) {
    Peer& pa = peers_[a];
    Neighbor& nb = pa.nbrs[b];
    const bool want = !pa.complete(n_pieces_) && !pa.initial_seed && nb.count_needed > 0 &&
                      !nb.override_uninterested;
    if (want == nb.i_interested) return;
    nb.i_interested = want;
    peers_[b].nbrs[a].they_interested = want;
    if (want && nb.they_unchoke && nb.transfer_in == kNone) try_start(b, a, now);
  }

  void pm_reveal(std::uint32_t peer) {
    Peer& p = peers_[peer];
    if (!cfg_.policy.partition_merge || p.initial_seed || p.complete(n_pieces_)) return;
    p.pm_T = cfg_.pm_t0;
    if (p.pm_armed) {
      p.pm_armed = false;
      ++p.pm_ver;
    }
  }

  void pm_maybe_arm(std::uint32_t peer, double now) {
    Peer& p = peers_[peer];
    if (!cfg_.policy.partition_merge || !p.active || p.departed || p.initial_seed ||
        p.complete(n_pieces_) || p.pm_armed || p.needed_visible > 0)
      return;
    if (p.pm_T <= 0.0) p.pm_T = cfg_.pm_t0;
    const double deadline = now + rng_.unit() * p.pm_T;
    p.pm_armed = true;
    push(deadline, EvKind::pm_check, peer, ++p.pm_ver);
  }

  // A piece completed or was aborted at `down`: stale "nothing to request"
  // verdicts may now be wrong, so clear them and poke idle unchoked links.
  void inflight_changed(std::uint32_t down, double now) {
    Peer& d = peers_[down];
    if (d.departed || d.complete(n_pieces_)) return;
    for (std::uint32_t b : d.nbr_order) {
      Neighbor& nb = d.nbrs[b];
      if (nb.override_uninterested) {
        nb.override_uninterested = false;
        refresh_interest(down, b, now);
      }
    }
    for (std::uint32_t b : d.nbr_order) {
      const Neighbor& nb = d.nbrs[b];
      if (nb.they_unchoke && nb.i_interested && nb.transfer_in == kNone) try_start(b, down, now);
    }
  }

  void set_have(std::uint32_t who, std::uint32_t piece, double now) {
    Peer& p = peers_[who];
    p.have[piece >> 6] |= 1ull << (piece & 63);
    ++p.have_count;
    const std::vector<std::uint32_t> order = p.nbr_order;  // HAVE fan-out snapshot
    for (std::uint32_t b : order) {
      Peer& q = peers_[b];
      ++q.rarity[piece];
      Neighbor& qn = q.nbrs[who];
      Neighbor& pn = p.nbrs[b];
      if (!q.has(piece)) {
        // Reveal: q now sees a needed piece at p.
        ++qn.count_needed;
        ++q.needed_visible;
        pm_reveal(b);
        if (qn.override_uninterested) qn.override_uninterested = false;
        refresh_interest(b, who, now);
      }
      if (q.has(piece)) {
        // p needs one piece fewer from q.
        --pn.count_needed;
        --p.needed_visible;
        refresh_interest(who, b, now);
      }
    }
    if (p.complete(n_pieces_)) {
      on_complete(who, now);
    } else {
      pm_maybe_arm(who, now);
    }
  }

  // Rarest-first over what `from` offers, ties uniform via the engine RNG.
  std::optional<std::uint32_t> select_piece(std::uint32_t down, std::uint32_t from) {
    const Peer& d = peers_[down];
    const Peer& u = peers_[from];
    std::uint32_t best = 0xffff;
    std::uint32_t ties = 0;
    for (std::uint32_t w = 0; w < words_; ++w) {
      std::uint64_t cand = u.have[w] & ~d.have[w] & ~d.inflight[w];
      while (cand) {
        const auto bit = static_cast<std::uint32_t>(__builtin_ctzll(cand));
        cand &= cand - 1;
        const std::uint32_t piece = (w << 6) | bit;
        const std::uint32_t r = d.rarity[piece];
        if (r < best) {
          best = r;
          ties = 1;
        } else if (r == best) {
          ++ties;
        }
      }
    }
    if (ties == 0) return std::nullopt;
    std::uint32_t skip = static_cast<std::uint32_t>(rng_.below(ties));
    for (std::uint32_t w = 0; w < words_; ++w) {
      std::uint64_t cand = u.have[w] & ~d.have[w] & ~d.inflight[w];
      while (cand) {
        const auto bit = static_cast<std::uint32_t>(__builtin_ctzll(cand));
        cand &= cand - 1;
        const std::uint32_t piece = (w << 6) | bit;
        if (d.rarity[piece] == best) {
          if (skip == 0) return piece;
          --skip;
        }
      }
    }
    return std::nullopt;  // unreachable
  }

  void try_start(std::uint32_t up, std::uint32_t down, double now) {
    Peer& u = peers_[up];
    Peer& d = peers_[down];
    if (u.departed || d.departed || d.complete(n_pieces_)) return;
    auto un = u.nbrs.find(down);
    if (un == u.nbrs.end() || !un->second.i_unchoke || un->second.transfer_out != kNone) return;
    Neighbor& dn = d.nbrs[up];
    if (!dn.i_interested) return;
    const std::optional<std::uint32_t> piece = select_piece(down, up);
    if (!piece) {
      dn.override_uninterested = true;
      refresh_interest(down, up, now);
      return;
    }
    add_transfer(up, down, *piece, now);
  }

  // ---- connections ----------------------------------------------------------
  enum class LinkClass : std::uint8_t {
    from_list,         // plain tracker list entry: refused when either side is full
    granted_external,  // budgeted cross-ISP grant: displaces a local link if full
    pm_grant,          // rescue link: never evicts, crosses the partition barrier
    seed_initiated,    // initial-seed connect: refused when either side is full
  };

  bool crosses_barrier(std::uint32_t a, std::uint32_t b) const {
    if (!barrier_) return false;
    const std::uint32_t k = *cfg_.partition_isp;
    return (peers_[a].isp == k) != (peers_[b].isp == k);
  }

  // Uniform same-ISP neighbor, if any (the displacement victim pool).
  std::optional<std::uint32_t> pick_local_neighbor(const Peer& p) {
    std::vector<std::uint32_t> locals;
    for (std::uint32_t b : p.nbr_order)
      if (peers_[b].isp == p.isp) locals.push_back(b);
    if (locals.empty()) return std::nullopt;
    return locals[rng_.below(locals.size())];
  }

  // Could this endpoint take one more link? A full set refuses new links and
  // the contact is discarded — except that a budgeted cross-ISP grant replaces
  // a local link, so the connection budget the tracker charged is not wasted.
  bool room_possible(const Peer& p, LinkClass cls) const {
    if (p.nbr_order.size() < cfg_.max_peer_set) return true;
    if (cls != LinkClass::granted_external) return false;
    for (std::uint32_t b : p.nbr_order)
      if (peers_[b].isp == p.isp) return true;
    return false;
  }

  void ensure_room(Peer& p, double now) {
    if (p.nbr_order.size() < cfg_.max_peer_set) return;
    const std::optional<std::uint32_t> victim = pick_local_neighbor(p);
    disconnect(p.id, *victim, now);
    ++result_.stats.evictions;
  }

  bool connect(std::uint32_t a, std::uint32_t b, LinkClass cls, double now) {
    if (a == b) return false;
    Peer& pa = peers_[a];
    Peer& pb = peers_[b];
    if (!pa.active || pa.departed || !pb.active || pb.departed) return false;
    if (pa.nbrs.count(b)) return false;
    if (cls != LinkClass::pm_grant && crosses_barrier(a, b)) {
      ++result_.stats.refused_connects;
      return false;
    }
    if (!room_possible(pa, cls) || !room_possible(pb, cls)) {
      ++result_.stats.refused_connects;
      return false;
    }
    ensure_room(pa, now);
    ensure_room(pb, now);
    pa.nbrs.emplace(b, Neighbor{});
    pa.nbr_order.push_back(b);
    pb.nbrs.emplace(a, Neighbor{});
    pb.nbr_order.push_back(a);
    // Bitfield exchange.
    std::uint32_t a_needs = 0;
    std::uint32_t b_needs = 0;
    for (std::uint32_t w = 0; w < words_; ++w) {
      a_needs += static_cast<std::uint32_t>(__builtin_popcountll(pb.have[w] & ~pa.have[w]));
      b_needs += static_cast<std::uint32_t>(__builtin_popcountll(pa.have[w] & ~pb.have[w]));
    }
    for (std::uint32_t piece = 0; piece < n_pieces_; ++piece) {
      if (pb.has(piece)) ++pa.rarity[piece];
      if (pa.has(piece)) ++pb.rarity[piece];
    }
    pa.nbrs[b].count_needed = a_needs;
    pa.needed_visible += a_needs;
    pb.nbrs[a].count_needed = b_needs;
    pb.needed_visible += b_needs;
    if (a_needs > 0) pm_reveal(a);
    if (b_needs > 0) pm_reveal(b);
    refresh_interest(a, b, now);
    refresh_interest(b, a, now);
    return true;
  }

  void disconnect(std::uint32_t a, std::uint32_t b, double now) {
    Peer& pa = peers_[a];
    Peer& pb = peers_[b];
    Neighbor& an = pa.nbrs[b];
    Neighbor& bn = pb.nbrs[a];
    // Drop the unchoke flags first so the abort fallout cannot restart a
    // transfer on the dying link.
    an.i_unchoke = an.they_unchoke = false;
    bn.i_unchoke = bn.they_unchoke = false;
    if (an.transfer_out != kNone) abort_transfer(an.transfer_out, now, true);
    if (an.transfer_in != kNone) abort_transfer(an.transfer_in, now, true);
    pa.needed_visible -= an.count_needed;
    pb.needed_visible -= bn.count_needed;
    for (std::uint32_t piece = 0; piece < n_pieces_; ++piece) {
      if (pb.has(piece)) --pa.rarity[piece];
      if (pa.has(piece)) --pb.rarity[piece];
    }
    if (pa.optimistic == b) pa.optimistic = kNone;
    if (pb.optimistic == a) pb.optimistic = kNone;
    pa.regular.erase(std::remove(pa.regular.begin(), pa.regular.end(), b), pa.regular.end());
    pb.regular.erase(std::remove(pb.regular.begin(), pb.regular.end(), a), pb.regular.end());
    pa.nbrs.erase(b);
    pb.nbrs.erase(a);
    pa.nbr_order.erase(std::find(pa.nbr_order.begin(), pa.nbr_order.end(), b));
    pb.nbr_order.erase(std::find(pb.nbr_order.begin(), pb.nbr_order.end(), a));
    pm_maybe_arm(a, now);
    pm_maybe_arm(b, now);
  }

  // ---- announces ------------------------------------------------------------
  void announce(std::uint32_t peer, AnnounceEvent ev, bool pm_flag, double now) {
    Peer& p = peers_[peer];
    AnnounceRequest req;
    req.peer = peer;
    req.isp = p.isp;
    req.event = ev;
    req.pm = pm_flag;
    req.initial_seed = p.initial_seed;
    // Completed leechers keep serving but stop hunting for peers; the initial
    // seed hunts only while its set has room, then settles into the regular
    // announce cadence like any other satisfied peer.
    const bool lazy_seed = p.complete(n_pieces_) &&
                           (!p.initial_seed || p.nbr_order.size() >= cfg_.max_peer_set);
    req.numwant = lazy_seed ? 0 : cfg_.numwant;
    ++result_.stats.announces;
    if (pm_flag) ++result_.stats.pm_requests;
    const AnnounceResponse resp = tracker_.announce(req, now);
    if (ev == AnnounceEvent::stopped) return;

    std::uint32_t new_links = 0;
    if (!lazy_seed) {
      for (std::uint32_t contact : resp.peers) {
        const LinkClass cls =
            p.initial_seed ? LinkClass::seed_initiated : LinkClass::from_list;
        if (connect(peer, contact, cls, now)) ++new_links;
      }
      if (resp.external) {
        ++result_.stats.external_grants;
        if (resp.via_pm) ++result_.stats.pm_grants;
        const LinkClass cls = resp.via_pm ? LinkClass::pm_grant : LinkClass::granted_external;
        if (connect(peer, *resp.external, cls, now)) {
          ++new_links;
          ++result_.stats.externals_connected;
        }
      }
    }

    if (pm_flag) return;  // rescue announces do not disturb the periodic schedule
    // Fruitful announces keep the short retry cadence; dry ones back off
    // exponentially toward the regular interval.
    if (lazy_seed) {
      p.retry = cfg_.announce_interval;
    } else if (new_links > 0) {
      p.retry = cfg_.announce_retry;
    } else {
      p.retry = std::min(p.retry * 2.0, cfg_.announce_interval);
    }
    push(now + p.retry, EvKind::announce, peer, ++p.announce_ver);
  }

  // ---- choke rounds -----------------------------------------------------------
  void apply_unchoke_set(std::uint32_t who, const std::vector<std::uint32_t>& want, double now) {
    Peer& p = peers_[who];
    for (std::uint32_t b : p.nbr_order) {
      Neighbor& nb = p.nbrs[b];
      const bool keep = std::find(want.begin(), want.end(), b) != want.end();
      if (nb.i_unchoke && !keep) {
        nb.i_unchoke = false;
        peers_[b].nbrs[who].they_unchoke = false;
        if (nb.transfer_out != kNone) abort_transfer(nb.transfer_out, now, true);
      }
    }
    for (std::uint32_t b : want) {
      Neighbor& nb = p.nbrs[b];
      if (!nb.i_unchoke) {
        nb.i_unchoke = true;
        peers_[b].nbrs[who].they_unchoke = true;
        try_start(who, b, now);
      }
    }
  }

  void leecher_round(std::uint32_t who, double now) {
    Peer& p = peers_[who];
    // Trailing-window received rates: delta of the fluid counters since the
    // previous round, neighbors in deterministic order.
    std::vector<std::uint32_t> cands;
    std::vector<double> score;
    for (std::uint32_t b : p.nbr_order) {
      Neighbor& nb = p.nbrs[b];
      const double live = live_received(p, b, now);
      const double delta = live - nb.rate_snapshot;
      nb.rate_snapshot = live;
      if (nb.they_interested) {
        cands.push_back(b);
        score.push_back(delta);
      }
    }
    std::vector<std::uint64_t> tiebreak(cands.size());
    for (std::size_t i = 0; i < cands.size(); ++i) tiebreak[i] = rng_.next_u64();
    std::vector<std::size_t> idx(cands.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
      if (score[x] != score[y]) return score[x] > score[y];
      return tiebreak[x] < tiebreak[y];
    });
    const std::size_t n_regular =
        std::min<std::size_t>(cfg_.unchoke_slots > 0 ? cfg_.unchoke_slots - 1 : 0, idx.size());
    std::vector<std::uint32_t> want;
    for (std::size_t i = 0; i < n_regular; ++i) want.push_back(cands[idx[i]]);
    p.regular = want;
    // Keep the standing optimistic pick if it is still a plausible choice.
    if (p.optimistic != kNone) {
      const bool regular_now =
          std::find(want.begin(), want.end(), p.optimistic) != want.end();
      const auto it = p.nbrs.find(p.optimistic);
      if (regular_now || it == p.nbrs.end() || !it->second.they_interested)
        p.optimistic = kNone;
    }
    if (p.optimistic == kNone) draw_optimistic(p, want);
    if (p.optimistic != kNone) want.push_back(p.optimistic);
    apply_unchoke_set(who, want, now);
  }

  void draw_optimistic(Peer& p, const std::vector<std::uint32_t>& regular) {
    std::vector<std::uint32_t> pool;
    for (std::uint32_t b : p.nbr_order) {
      if (!p.nbrs[b].they_interested) continue;
      if (std::find(regular.begin(), regular.end(), b) != regular.end()) continue;
      pool.push_back(b);
    }
    p.optimistic = pool.empty() ? kNone : pool[rng_.below(pool.size())];
  }

  void seed_round(std::uint32_t who, double now) {
    Peer& p = peers_[who];
    std::vector<std::uint32_t> interested;
    for (std::uint32_t b : p.nbr_order)
      if (p.nbrs[b].they_interested) interested.push_back(b);
    std::sort(interested.begin(), interested.end());
    std::vector<std::uint32_t> want;
    if (!interested.empty()) {
      auto it = std::lower_bound(interested.begin(), interested.end(), p.seed_cursor);
      const std::size_t start = static_cast<std::size_t>(it - interested.begin());
      const std::size_t take = std::min<std::size_t>(cfg_.unchoke_slots, interested.size());
      for (std::size_t i = 0; i < take; ++i)
        want.push_back(interested[(start + i) % interested.size()]);
    }
    apply_unchoke_set(who, want, now);
  }

  bool on_choke_round(std::uint32_t who, double now) {
    Peer& p = peers_[who];
    if (p.departed) return false;
    if (p.initial_seed || p.complete(n_pieces_))
      seed_round(who, now);
    else
      leecher_round(who, now);
    push(now + cfg_.choke_interval, EvKind::choke_round, who, 0);
    return true;
  }

  bool on_optimistic_round(std::uint32_t who, double now) {
    Peer& p = peers_[who];
    if (p.departed) return false;
    if (p.initial_seed || p.complete(n_pieces_)) {
      // Advance the rotation cursor one interested neighbor.
      std::vector<std::uint32_t> interested;
      for (std::uint32_t b : p.nbr_order)
        if (p.nbrs[b].they_interested) interested.push_back(b);
      if (!interested.empty()) {
        std::sort(interested.begin(), interested.end());
        auto it = std::lower_bound(interested.begin(), interested.end(), p.seed_cursor);
        if (it == interested.end()) it = interested.begin();
        p.seed_cursor = *it + 1;
        seed_round(who, now);
      }
    } else {
      const std::uint32_t old = p.optimistic;
      p.optimistic = kNone;
      draw_optimistic(p, p.regular);
      if (p.optimistic != old) {
        std::vector<std::uint32_t> want = p.regular;
        if (p.optimistic != kNone) want.push_back(p.optimistic);
        apply_unchoke_set(who, want, now);
      }
    }
    push(now + cfg_.optimistic_interval, EvKind::optimistic_round, who, 0);
    return true;
  }

  // ---- lifecycle ------------------------------------------------------------
  bool on_arrival(std::uint32_t who, double now) {
    Peer& p = peers_[who];
    p.active = true;
    p.arrival = now;
    p.retry = cfg_.announce_retry;
    p.pm_T = cfg_.pm_t0;
    arrived_.push_back(who);
    announce(who, AnnounceEvent::started, false, now);
    push(now + cfg_.choke_interval, EvKind::choke_round, who, 0);
    push(now + cfg_.optimistic_interval, EvKind::optimistic_round, who, 0);
    pm_maybe_arm(who, now);
    return true;
  }

  bool on_announce_due(std::uint32_t who, std::uint64_t ver, double now) {
    Peer& p = peers_[who];
    if (p.departed || ver != p.announce_ver) return false;
    announce(who, AnnounceEvent::periodic, false, now);
    return true;
  }

  bool on_pm_check(std::uint32_t who, std::uint64_t ver, double now) {
    Peer& p = peers_[who];
    if (p.departed || ver != p.pm_ver || !p.pm_armed) return false;
    p.pm_armed = false;
    if (p.complete(n_pieces_) || p.needed_visible > 0) return false;
    announce(who, AnnounceEvent::periodic, true, now);
    if (!p.departed && !p.complete(n_pieces_) && p.needed_visible == 0) {
      p.pm_T *= 2.0;  // fruitless check: exponential backoff
      pm_maybe_arm(who, now);
    }
    return true;
  }

  bool on_piece_done(std::uint32_t tid, std::uint64_t ver, double now) {
    Transfer& t = transfers_[tid];
    if (!t.active || t.ver != ver) return false;
    complete_piece(tid, now);
    return true;
  }

  bool on_isp_done(std::uint32_t isp, double now) {
    IspFlow& fl = flows_[isp];
    fl.rep_time = std::numeric_limits<double>::infinity();
    flow_advance(fl, now);
    bool any = false;
    while (!fl.heap.empty()) {
      const IspFlow::Entry top = fl.heap.top();
      const Transfer& t = transfers_[top.tid];
      if (!t.active || t.ver != top.ver) {
        fl.heap.pop();
        continue;
      }
      if (top.target > fl.W + 1e-7) break;  // not ripe: a stale early wake-up
      fl.heap.pop();
      complete_piece(top.tid, now);
      any = true;
    }
    flow_need_rep(isp, now);
    return any;
  }

  void on_complete(std::uint32_t who, double now) {
    Peer& p = peers_[who];
    ++completions_;
    p.completion_time = now;
    result_.completions.push_back({static_cast<int>(who), p.arrival, now, p.max_upload});
    // Interest in others ends; neighbors hear "not interested".
    for (std::uint32_t b : p.nbr_order) {
      Neighbor& nb = p.nbrs[b];
      if (nb.i_interested) {
        nb.i_interested = false;
        peers_[b].nbrs[who].they_interested = false;
      }
    }
    if (p.pm_armed) {
      p.pm_armed = false;
      ++p.pm_ver;
    }
    p.seed_cursor = 0;
    announce(who, AnnounceEvent::completed, false, now);
    push(now + cfg_.seed_linger, EvKind::departure, who, 0);
    // Churn: every first-set completion activates one second-set peer.
    if (p.churn_set == 0 && next_churn_ < cfg_.churn_second_set) {
      const std::uint32_t next = cfg_.torrent_size + next_churn_;
      ++next_churn_;
      push(now, EvKind::arrival, next, 0);
    }
  }

  bool on_departure(std::uint32_t who, double now) {
    Peer& p = peers_[who];
    if (p.departed || p.initial_seed) return false;
    announce(who, AnnounceEvent::stopped, false, now);
    const std::vector<std::uint32_t> nbrs = p.nbr_order;
    for (std::uint32_t b : nbrs) disconnect(who, b, now);
    p.departed = true;
    p.active = false;
    ++p.announce_ver;
    ++p.pm_ver;
    ++departures_;
    return true;
  }

  bool on_partition(double now) {
    barrier_ = true;
    const std::uint32_t k = *cfg_.partition_isp;
    for (std::uint32_t member : isp_members_[k]) {
      const std::vector<std::uint32_t> nbrs = peers_[member].nbr_order;
      for (std::uint32_t b : nbrs)
        if (peers_[b].isp != k) disconnect(member, b, now);
    }
    return true;
  }

  // ---- termination ----------------------------------------------------------
  bool finish(double end) {
    result_.end_time = end;
    result_.ledger.set_end_time(end);
    finalize_mean();
    done_ = true;
    return false;
  }

  bool stall_abort(double at) {
    // Diagnostic: ISPs with incomplete peers and no link crossing their edge.
    for (std::uint32_t isp = 0; isp < cfg_.n_isps(); ++isp) {
      bool incomplete = false;
      bool crossing = false;
      for (std::uint32_t member : isp_members_[isp]) {
        const Peer& p = peers_[member];
        if (!p.active || p.departed) continue;
        if (!p.complete(n_pieces_)) incomplete = true;
        for (std::uint32_t b : p.nbr_order)
          if (peers_[b].isp != isp) crossing = true;
      }
      if (incomplete && !crossing) result_.partitioned_isps.push_back(isp);
    }
    std::string reason = "no transfer progress for " +
                         std::to_string(cfg_.stall_window_or_default()) + " s";
    if (!result_.partitioned_isps.empty()) {
      reason += "; partitioned ISPs:";
      for (std::uint32_t isp : result_.partitioned_isps) reason += ' ' + std::to_string(isp);
    }
    return abort_run(at, reason);
  }

  bool abort_run(double at, std::string reason) {
    result_.aborted = true;
    result_.abort_reason = std::move(reason);
    result_.end_time = at;
    result_.ledger.set_end_time(at);
    finalize_mean();
    done_ = true;
    return false;
  }

  void finalize_mean() {
    double sum = 0.0;
    std::uint64_t n = 0;
    for (std::uint32_t who : arrived_) {
      if (peers_[who].initial_seed) continue;
      sum += peers_[who].max_upload;
      ++n;
    }
    result_.mean_max_upload = n > 0 ? sum / static_cast<double>(n) : 0.0;
  }

  // ---- members --------------------------------------------------------------
  ScenarioConfig cfg_;
  std::uint32_t n_pieces_;
  std::uint32_t words_;
  Tracker tracker_;
  Rng rng_;

  std::vector<Peer> peers_;
  std::vector<std::vector<std::uint32_t>> isp_members_;
  std::vector<Transfer> transfers_;
  std::vector<std::uint32_t> free_transfers_;
  std::vector<IspFlow> flows_;

  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> queue_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;
  double last_progress_ = 0.0;
  bool barrier_ = false;
  bool done_ = false;

  std::uint32_t n_leechers_ = 0;
  std::uint32_t completions_ = 0;
  std::uint32_t departures_ = 0;
  std::uint32_t next_churn_ = 0;
  std::vector<std::uint32_t> arrived_;

  RunResult result_;
};

}  // namespace localswarm

#pragma once

// Tracker with ISP-aware peer hand-out.
//
// In locality mode an announce returns (a) up to `numwant` random peers from
// the requester's own ISP and (b) at most ONE peer from outside it, budgeted
// by a per-ISP cap on outgoing inter-ISP connections. The budget is a ledger:
// every grant is charged to the receiving peer, and departures/expiries repay
// exactly what the departing peer was charged, so
//     outgoing_count[I] == sum of handouts of I's live members
// holds at every step (the property tests recompute this).
//
// Hand-outs are spread evenly: each member's hand-outs are capped at its
// share of the ISP budget, ceil(L / members). With a small budget this
// degenerates to "first L distinct announcers, in (random) arrival order";
// with a large budget every announce is granted until the requester has its
// full share or the cap binds.
//
// The initial seed is exempt from locality entirely: its announces are
// answered with a uniform sample of the whole swarm, exactly like the
// plain-BitTorrent mode.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "localswarm/rng.hpp"
#include "localswarm/scenario.hpp"

namespace localswarm {

struct stale_peer_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class AnnounceEvent : std::uint8_t { started, periodic, stopped, completed };

inline const char* to_string(AnnounceEvent e) {
  switch (e) {
    case AnnounceEvent::started: return "started";
    case AnnounceEvent::periodic: return "periodic";
    case AnnounceEvent::stopped: return "stopped";
    case AnnounceEvent::completed: return "completed";
  }
  return "?";
}

struct AnnounceRequest {
  std::uint32_t peer = 0;
  std::uint32_t isp = 0;
  AnnounceEvent event = AnnounceEvent::periodic;
  bool pm = false;       // partition-merge rescue request
  std::uint32_t numwant = 50;
  bool initial_seed = false;
};

struct AnnounceResponse {
  std::vector<std::uint32_t> peers;           // same-ISP contacts (whole-swarm sample
                                              // for the initial seed / random mode)
  std::optional<std::uint32_t> external;      // the single cross-ISP contact, if granted
  bool via_pm = false;                        // external came from the rescue path
  double interval = 1800;
};

struct TrackerParams {
  PolicyKind mode = PolicyKind::locality;
  std::uint64_t limit = 4;        // per-ISP outgoing inter-ISP connection cap
  bool round_robin = false;       // external pick: rotate ISPs instead of uniform peers
  bool partition_merge = false;   // honor pm announces
  double pm_t1 = 60;              // min spacing of rescue grants per ISP
  double announce_interval = 1800;
  double peer_expiry = 2700;      // silence after which a peer is dropped (strict >)
};

class Tracker {
 public:
  Tracker(TrackerParams params, Rng rng) : p_(params), rng_(rng) {}

  static TrackerParams params_from(const ScenarioConfig& cfg) {
    TrackerParams p;
    p.mode = cfg.policy.kind;
    p.limit = cfg.policy.limit;
    p.round_robin = cfg.policy.round_robin;
    p.partition_merge = cfg.policy.partition_merge;
    p.pm_t1 = cfg.pm_t1;
    p.announce_interval = cfg.announce_interval;
    p.peer_expiry = cfg.peer_expiry;
    return p;
  }

  AnnounceResponse announce(const AnnounceRequest& req, double now) {
    expire(now);
    ensure_isp(req.isp);

    auto it = peers_.find(req.peer);
    if (req.event == AnnounceEvent::stopped) {
      if (it != peers_.end()) remove_peer(req.peer);
      AnnounceResponse r;
      r.interval = p_.announce_interval;
      return r;
    }
    if (it == peers_.end()) {
      if (req.event != AnnounceEvent::started)
        throw stale_peer_error("peer " + std::to_string(req.peer) +
                               " is not registered; re-announce with 'started'");
      it = register_peer(req);
    }
    PeerRec& rec = it->second;
    if (rec.isp != req.isp)
      throw stale_peer_error("peer " + std::to_string(req.peer) + " moved ISP");
    rec.last = now;
    if (req.event == AnnounceEvent::completed) rec.seed = true;
    expiry_.push({now + p_.peer_expiry, req.peer});

    AnnounceResponse resp;
    resp.interval = p_.announce_interval;

    if (p_.mode == PolicyKind::bittorrent_random || rec.initial_seed) {
      resp.peers = sample_global(req.numwant, req.peer);
      return resp;
    }

    resp.peers = sample_local(req.isp, req.numwant, req.peer);

    if (req.pm && p_.partition_merge) {
      // Rescue path: rate-limited per ISP, never charged against the cap.
      IspRec& isp = isps_[req.isp];
      if (!(isp.pm_last >= 0) || now - isp.pm_last >= p_.pm_t1) {
        if (auto ext = select_external(req.isp)) {
          isp.pm_last = now;
          resp.external = ext;
          resp.via_pm = true;
        }
      }
      return resp;
    }

    // Budgeted path. Peers asking for no contacts (numwant 0) get none; each
    // member may hold at most its share of the budget, ceil(L / members).
    IspRec& isp = isps_[req.isp];
    const std::uint64_t members = isp.members.size();
    if (req.numwant > 0 && isp.outgoing < p_.limit && members > 0 &&
        rec.handouts < (p_.limit + members - 1) / members) {
      if (auto ext = select_external(req.isp)) {
        isp.outgoing++;
        rec.handouts++;
        resp.external = ext;
      }
    }
    return resp;
  }

  // Drop peers whose last announce is strictly older than the expiry window,
  // repaying their hand-outs to the ISP budget.
  void expire(double now) {
    while (!expiry_.empty() && expiry_.top().first < now) {
      auto [deadline, peer] = expiry_.top();
      expiry_.pop();
      auto it = peers_.find(peer);
      if (it == peers_.end()) continue;
      const double due = it->second.last + p_.peer_expiry;
      if (now > due) {
        remove_peer(peer);
      } else {
        // Refreshed since this entry was queued (or exactly at the boundary,
        // where the strict rule keeps the peer): queue the live deadline.
        expiry_.push({due, peer});
      }
    }
  }

  // Pick one peer outside `from_isp`, or nothing if none exists.
  std::optional<std::uint32_t> select_external(std::uint32_t from_isp) {
    ensure_isp(from_isp);
    const std::uint64_t local = isps_[from_isp].members.size();
    if (global_.size() <= local) return std::nullopt;
    if (!p_.round_robin) {
      // Uniform over all external peers; rejection-sample the global list.
      for (;;) {
        std::uint32_t cand = global_[rng_.below(global_.size())];
        if (peers_.at(cand).isp != from_isp) return cand;
      }
    }
    // Round robin over the stable ISP ordering (index order), skipping the
    // requester's ISP and empty ISPs; uniform within the chosen ISP.
    for (std::size_t step = 0; step < isps_.size(); ++step) {
      std::uint32_t c = static_cast<std::uint32_t>((rr_cursor_ + step) % isps_.size());
      if (c == from_isp || isps_[c].members.empty()) continue;
      rr_cursor_ = (c + 1) % isps_.size();
      const auto& m = isps_[c].members;
      return m[rng_.below(m.size())];
    }
    return std::nullopt;
  }

  // --- introspection (tests, engine bookkeeping) ---
  std::uint64_t outgoing_count(std::uint32_t isp) const {
    return isp < isps_.size() ? isps_[isp].outgoing : 0;
  }
  std::uint64_t handouts(std::uint32_t peer) const {
    auto it = peers_.find(peer);
    return it == peers_.end() ? 0 : it->second.handouts;
  }
  bool known(std::uint32_t peer) const { return peers_.count(peer) != 0; }
  std::size_t registered(std::uint32_t isp) const {
    return isp < isps_.size() ? isps_[isp].members.size() : 0;
  }
  std::size_t registered_total() const { return global_.size(); }
  // Oracle for the ledger-consistency property: recompute the budget charge
  // from scratch and compare with the running counter.
  std::uint64_t recompute_outgoing(std::uint32_t isp) const {
    if (isp >= isps_.size()) return 0;
    std::uint64_t sum = 0;
    for (auto peer : isps_[isp].members) sum += peers_.at(peer).handouts;
    return sum;
  }
  std::size_t n_isps() const { return isps_.size(); }

 private:
  struct PeerRec {
    std::uint32_t isp = 0;
    double last = 0;
    std::uint64_t handouts = 0;
    bool initial_seed = false;
    bool seed = false;
    std::uint32_t isp_pos = 0;     // index in isps_[isp].members
    std::uint32_t global_pos = 0;  // index in global_
  };
  struct IspRec {
    std::vector<std::uint32_t> members;
    std::uint64_t outgoing = 0;
    double pm_last = -1;  // time of last rescue grant; -1 = never
  };

  void ensure_isp(std::uint32_t isp) {
    if (isp >= isps_.size()) isps_.resize(isp + 1);
  }

  std::unordered_map<std::uint32_t, PeerRec>::iterator register_peer(const AnnounceRequest& req) {
    PeerRec rec;
    rec.isp = req.isp;
    rec.initial_seed = req.initial_seed;
    rec.isp_pos = static_cast<std::uint32_t>(isps_[req.isp].members.size());
    rec.global_pos = static_cast<std::uint32_t>(global_.size());
    isps_[req.isp].members.push_back(req.peer);
    global_.push_back(req.peer);
    return peers_.emplace(req.peer, rec).first;
  }

  void remove_peer(std::uint32_t peer) {
    auto it = peers_.find(peer);
    if (it == peers_.end()) return;
    PeerRec& rec = it->second;
    IspRec& isp = isps_[rec.isp];
    isp.outgoing -= rec.handouts;
    // Swap-remove from both membership lists, fixing the moved peer's index.
    auto drop = [&](std::vector<std::uint32_t>& v, std::uint32_t pos, auto fix) {
      v[pos] = v.back();
      v.pop_back();
      if (pos < v.size()) fix(peers_.at(v[pos]), pos);
    };
    drop(isp.members, rec.isp_pos, [](PeerRec& r, std::uint32_t p) { r.isp_pos = p; });
    drop(global_, rec.global_pos, [](PeerRec& r, std::uint32_t p) { r.global_pos = p; });
    peers_.erase(it);
  }

  // Sample up to `want` peers uniformly without replacement, excluding
  // `exclude`, via partial Fisher-Yates directly on the membership list
  // (which is an unordered set, so mutation is harmless).
  std::vector<std::uint32_t> sample_from(std::vector<std::uint32_t>& pool, std::uint32_t want,
                                         std::uint32_t exclude) {
    std::vector<std::uint32_t> out;
    if (pool.empty()) return out;
    // Move the excluded peer out of the sampling range.
    auto fix_pos = [&](std::uint32_t peer, std::uint32_t pos, bool global) {
      auto& rec = peers_.at(peer);
      (global ? rec.global_pos : rec.isp_pos) = pos;
    };
    const bool is_global = (&pool == &global_);
    std::size_t lo = 0;
    auto exc = peers_.find(exclude);
    if (exc != peers_.end()) {
      std::uint32_t pos = is_global ? exc->second.global_pos : exc->second.isp_pos;
      if (pos < pool.size() && pool[pos] == exclude) {
        std::swap(pool[0], pool[pos]);
        fix_pos(pool[pos], pos, is_global);
        fix_pos(pool[0], 0, is_global);
        lo = 1;
      }
    }
    const std::size_t avail = pool.size() - lo;
    const std::size_t k = std::min<std::size_t>(want, avail);
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = lo + i + static_cast<std::size_t>(rng_.below(avail - i));
      std::swap(pool[lo + i], pool[j]);
      fix_pos(pool[j], static_cast<std::uint32_t>(j), is_global);
      fix_pos(pool[lo + i], static_cast<std::uint32_t>(lo + i), is_global);
      out.push_back(pool[lo + i]);
    }
    return out;
  }

  std::vector<std::uint32_t> sample_local(std::uint32_t isp, std::uint32_t want,
                                          std::uint32_t exclude) {
    return sample_from(isps_[isp].members, want, exclude);
  }
  std::vector<std::uint32_t> sample_global(std::uint32_t want, std::uint32_t exclude) {
    return sample_from(global_, want, exclude);
  }

  TrackerParams p_;
  Rng rng_;
  std::unordered_map<std::uint32_t, PeerRec> peers_;
  std::vector<IspRec> isps_;
  std::vector<std::uint32_t> global_;
  std::size_t rr_cursor_ = 0;
  // Lazy expiry queue: (deadline, peer); stale entries are skipped on pop.
  std::priority_queue<std::pair<double, std::uint32_t>,
                      std::vector<std::pair<double, std::uint32_t>>,
                      std::greater<>>
      expiry_;
};

// ---------------------------------------------------------------------------
// Announce-trace replay: one announce per line, "time peer isp event pm".
// Used by the oracle tests to drive a tracker from a plain-text script.

inline std::vector<AnnounceResponse> replay_trace(Tracker& tracker, const std::string& text,
                                                  std::uint32_t numwant = 80) {
  std::vector<AnnounceResponse> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    std::istringstream ls(s);
    double t;
    AnnounceRequest req;
    std::string event;
    int pm = 0;
    if (!(ls >> t >> req.peer >> req.isp >> event >> pm))
      throw config_error("trace line " + std::to_string(lineno) +
                         ": expected 'time peer isp event pm'");
    req.numwant = numwant;
    req.pm = pm != 0;
    if (event == "started")
      req.event = AnnounceEvent::started;
    else if (event == "periodic")
      req.event = AnnounceEvent::periodic;
    else if (event == "stopped")
      req.event = AnnounceEvent::stopped;
    else if (event == "completed")
      req.event = AnnounceEvent::completed;
    else
      throw config_error("trace line " + std::to_string(lineno) + ": unknown event '" + event +
                         "'");
    out.push_back(tracker.announce(req, t));
  }
  return out;
}

}  // namespace localswarm

#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>
#include <sstream>

#include "localswarm/tracker.hpp"

using namespace localswarm;

namespace {

Tracker make_tracker(std::uint64_t limit, bool rr = false, bool pm = false,
                     std::uint64_t seed = 7) {
  TrackerParams p;
  p.mode = PolicyKind::locality;
  p.limit = limit;
  p.round_robin = rr;
  p.partition_merge = pm;
  return Tracker(p, Rng(seed, 2));
}

AnnounceRequest req(std::uint32_t peer, std::uint32_t isp,
                    AnnounceEvent ev = AnnounceEvent::started, bool pm = false) {
  AnnounceRequest r;
  r.peer = peer;
  r.isp = isp;
  r.event = ev;
  r.pm = pm;
  r.numwant = 80;
  return r;
}

// Register `n` peers in `isp` starting at id `base`, one announce each.
void populate(Tracker& t, std::uint32_t isp, std::uint32_t base, std::uint32_t n,
              double at = 0) {
  for (std::uint32_t i = 0; i < n; ++i) t.announce(req(base + i, isp), at);
}

std::string dump_responses(const std::vector<AnnounceResponse>& rs) {
  std::ostringstream o;
  for (const auto& r : rs) {
    for (auto p : r.peers) o << p << ',';
    o << '|' << (r.external ? static_cast<long long>(*r.external) : -1) << '|' << r.via_pm
      << '\n';
  }
  return o.str();
}

}  // namespace

TEST_CASE("scripted announces: budget of 4 grants exactly 4 externals") {
  auto t = make_tracker(4);
  populate(t, 1, 100, 3);  // external candidates
  std::ostringstream trace;
  for (int i = 0; i < 10; ++i)
    trace << i + 1 << ' ' << i << " 0 started 0\n";
  auto rs = replay_trace(t, trace.str());
  int grants = 0;
  for (const auto& r : rs) grants += r.external.has_value();
  CHECK(grants == 4);
  CHECK(t.outgoing_count(0) == 4);

  // Re-announces do not push past the cap.
  for (int i = 0; i < 10; ++i) t.announce(req(i, 0, AnnounceEvent::periodic), 20.0 + i);
  CHECK(t.outgoing_count(0) == 4);

  // A departing grant holder repays its hand-out; the next announce can then
  // be granted again.
  std::uint32_t holder = 0;
  for (std::uint32_t i = 0; i < 10; ++i)
    if (t.handouts(i) == 1) {
      holder = i;
      break;
    }
  t.announce(req(holder, 0, AnnounceEvent::stopped), 40);
  CHECK(t.outgoing_count(0) == 3);
  int regrants = 0;
  for (std::uint32_t i = 0; i < 10; ++i)
    if (i != holder)
      regrants += t.announce(req(i, 0, AnnounceEvent::periodic), 41.0 + i).external.has_value();
  CHECK(regrants == 1);
  CHECK(t.outgoing_count(0) == 4);
}

TEST_CASE("single-ISP swarm never hands out externals") {
  auto t = make_tracker(1000);
  for (int i = 0; i < 50; ++i) {
    auto r = t.announce(req(i, 0), i);
    CHECK_FALSE(r.external.has_value());
  }
  CHECK(t.outgoing_count(0) == 0);
}

TEST_CASE("asking for zero peers yields neither contacts nor a grant") {
  auto t = make_tracker(1000);
  populate(t, 0, 0, 5);
  populate(t, 1, 100, 5);
  auto quiet = req(0, 0, AnnounceEvent::completed);
  quiet.numwant = 0;
  auto r = t.announce(quiet, 10.0);
  CHECK(r.peers.empty());
  CHECK_FALSE(r.external.has_value());
  CHECK(t.outgoing_count(0) == 0);
  // The same announce with numwant restored is granted as usual.
  auto r2 = t.announce(req(1, 0, AnnounceEvent::periodic), 20.0);
  CHECK(r2.external.has_value());
  CHECK(t.outgoing_count(0) == 1);
}

TEST_CASE("huge budget: every announce is granted until the cap binds") {
  auto t = make_tracker(3600);
  // 10 ISPs x 100 peers.
  for (std::uint32_t isp = 0; isp < 10; ++isp) populate(t, isp, isp * 100, 100);
  // ISP 0 registered before any external candidates existed, so its
  // 'started' announces were not granted.
  CHECK(t.outgoing_count(0) == 0);
  // Rounds of periodic announces from ISP 0; each round grants all 100.
  for (int round = 1; round <= 36; ++round)
    for (std::uint32_t i = 0; i < 100; ++i)
      t.announce(req(i, 0, AnnounceEvent::periodic), round * 10.0);
  CHECK(t.outgoing_count(0) == 3600);
  // Budget exhausted: further announces get nothing.
  for (std::uint32_t i = 0; i < 100; ++i) {
    auto r = t.announce(req(i, 0, AnnounceEvent::periodic), 400.0);
    CHECK_FALSE(r.external.has_value());
  }
  CHECK(t.outgoing_count(0) == 3600);
  // Hand-outs stayed balanced: every peer got exactly 36.
  for (std::uint32_t i = 0; i < 100; ++i) CHECK(t.handouts(i) == 36);
}

TEST_CASE("uniform external selection is proportional to ISP size") {
  auto t = make_tracker(4);
  populate(t, 0, 0, 5);
  populate(t, 1, 100, 10);
  populate(t, 2, 200, 30);
  populate(t, 3, 300, 60);
  std::map<std::uint32_t, int> by_isp;
  const int draws = 100'000;
  for (int i = 0; i < draws; ++i) {
    auto pick = t.select_external(0);
    REQUIRE(pick.has_value());
    by_isp[*pick / 100]++;
  }
  CHECK(by_isp[0] == 0);
  // Binomial 3-sigma bands around p = size/100.
  auto in_band = [&](int count, double p) {
    double sd = std::sqrt(draws * p * (1 - p));
    return std::abs(count - draws * p) < 3.5 * sd;
  };
  CHECK(in_band(by_isp[1], 0.10));
  CHECK(in_band(by_isp[2], 0.30));
  CHECK(in_band(by_isp[3], 0.60));
}

TEST_CASE("round-robin external selection balances ISPs exactly") {
  auto t = make_tracker(1000, /*rr=*/true);
  populate(t, 0, 0, 5);
  populate(t, 1, 100, 1);
  populate(t, 2, 200, 10);
  populate(t, 3, 300, 100);
  std::map<std::uint32_t, int> by_isp;
  for (int i = 0; i < 300; ++i) {
    auto pick = t.select_external(0);
    REQUIRE(pick.has_value());
    by_isp[*pick / 100]++;
  }
  CHECK(by_isp[1] == 100);
  CHECK(by_isp[2] == 100);
  CHECK(by_isp[3] == 100);

  SECTION("empty ISPs are skipped in rotation") {
    auto t2 = make_tracker(1000, true);
    populate(t2, 0, 0, 2);
    populate(t2, 2, 200, 3);
    populate(t2, 4, 400, 3);
    std::map<std::uint32_t, int> c2;
    for (int i = 0; i < 10; ++i) c2[*t2.select_external(0) / 100]++;
    CHECK(c2[2] == 5);
    CHECK(c2[4] == 5);
  }
}

TEST_CASE("one external ISP is always chosen, under both strategies") {
  for (bool rr : {false, true}) {
    auto t = make_tracker(100, rr);
    populate(t, 0, 0, 4);
    populate(t, 1, 100, 6);
    for (int i = 0; i < 25; ++i) {
      auto pick = t.select_external(0);
      REQUIRE(pick.has_value());
      CHECK(*pick >= 100);
    }
  }
}

TEST_CASE("rescue grants are rate-limited per ISP and bypass the budget") {
  auto t = make_tracker(1, false, /*pm=*/true);
  populate(t, 0, 0, 4);
  populate(t, 1, 100, 4);
  populate(t, 2, 200, 4);
  // Exhaust ISP 0's budget of 1.
  t.announce(req(0, 0, AnnounceEvent::periodic), 10);
  CHECK(t.outgoing_count(0) == 1);

  auto r1 = t.announce(req(1, 0, AnnounceEvent::periodic, /*pm=*/true), 100);
  CHECK(r1.external.has_value());
  CHECK(r1.via_pm);
  CHECK(t.outgoing_count(0) == 1);  // not charged
  CHECK(t.handouts(1) == 0);

  auto r2 = t.announce(req(2, 0, AnnounceEvent::periodic, true), 130);  // 30 s later
  CHECK_FALSE(r2.external.has_value());

  auto r3 = t.announce(req(3, 0, AnnounceEvent::periodic, true), 160);  // T1 elapsed
  CHECK(r3.external.has_value());

  // Same instant, different ISP: independent limiter.
  auto r4 = t.announce(req(100, 1, AnnounceEvent::periodic, true), 160);
  CHECK(r4.external.has_value());

  SECTION("pm flag on a pm-disabled tracker falls back to the budgeted path") {
    auto t2 = make_tracker(4, false, /*pm=*/false);
    populate(t2, 0, 0, 2);
    populate(t2, 1, 100, 2);
    auto r = t2.announce(req(0, 0, AnnounceEvent::periodic, /*pm=*/true), 50);
    CHECK(r.external.has_value());
    CHECK_FALSE(r.via_pm);
    // ISP 0 registered before any candidates existed, so this is its first
    // successful grant — and it was charged against the budget.
    CHECK(t2.outgoing_count(0) == 1);
  }
}

TEST_CASE("expiry is strict and repays hand-outs") {
  TrackerParams p;
  p.mode = PolicyKind::locality;
  p.limit = 4;  // binds after the four grants below, so refreshes grant nothing
  p.peer_expiry = 2700;
  Tracker t(p, Rng(3, 2));
  populate(t, 1, 100, 5);  // candidates, announced at t=0

  t.announce(req(0, 0), 0);
  t.announce(req(1, 0), 0);
  // Drive A(=0) and B(=1) to two hand-outs each.
  t.announce(req(0, 0, AnnounceEvent::periodic), 1);
  t.announce(req(1, 0, AnnounceEvent::periodic), 1);
  CHECK(t.outgoing_count(0) == 4);
  CHECK(t.handouts(0) == 2);
  CHECK(t.handouts(1) == 2);

  // Keep A and the candidates fresh; B goes silent after t=1. All refreshes
  // happen before B's expiry deadline (2701) so the budget stays bound and
  // none of them can be granted.
  for (double at : {1000.0, 2000.0, 2600.0}) {
    t.announce(req(0, 0, AnnounceEvent::periodic), at);
    for (int i = 0; i < 5; ++i) t.announce(req(100 + i, 1, AnnounceEvent::periodic), at);
  }

  t.expire(3701.0);  // B due at 1 + 2700 = 2701 < 3701: gone
  CHECK_FALSE(t.known(1));
  CHECK(t.known(0));
  CHECK(t.outgoing_count(0) == 2);

  SECTION("exactly at the boundary the peer stays") {
    Tracker t2(p, Rng(4, 2));
    t2.announce(req(9, 0), 0);
    t2.expire(2700.0);
    CHECK(t2.known(9));
    t2.expire(2700.5);
    CHECK_FALSE(t2.known(9));
  }
}

TEST_CASE("announces never return the requester; externals never local") {
  auto t = make_tracker(3600);
  for (std::uint32_t isp = 0; isp < 4; ++isp) populate(t, isp, isp * 100, 25);
  for (std::uint32_t isp = 0; isp < 4; ++isp)
    for (std::uint32_t i = 0; i < 25; ++i) {
      auto r = t.announce(req(isp * 100 + i, isp, AnnounceEvent::periodic), 50);
      for (auto peer : r.peers) {
        CHECK(peer != isp * 100 + i);
        CHECK(peer / 100 == isp);  // locals really are local
      }
      if (r.external) CHECK(*r.external / 100 != isp);
      CHECK(r.peers.size() <= 80);
    }
}

TEST_CASE("initial seed announces ignore locality and charge nothing") {
  auto t = make_tracker(2);
  populate(t, 0, 0, 30);
  populate(t, 1, 100, 30);
  AnnounceRequest r = req(999, 5);
  r.initial_seed = true;
  auto resp = t.announce(r, 1);
  CHECK(resp.peers.size() == 60);
  std::set<std::uint32_t> isps;
  for (auto peer : resp.peers) isps.insert(peer / 100);
  CHECK(isps.size() == 2);  // drew from the whole swarm
  CHECK_FALSE(resp.external.has_value());
  CHECK(t.outgoing_count(5) == 0);
  CHECK(t.handouts(999) == 0);
}

TEST_CASE("random mode samples the whole swarm for everyone") {
  TrackerParams p;
  p.mode = PolicyKind::bittorrent_random;
  Tracker t(p, Rng(11, 2));
  for (std::uint32_t isp = 0; isp < 5; ++isp) populate(t, isp, isp * 100, 20);
  auto resp = t.announce(req(0, 0, AnnounceEvent::periodic), 5);
  CHECK(resp.peers.size() == 80);
  std::set<std::uint32_t> isps;
  for (auto peer : resp.peers) isps.insert(peer / 100);
  CHECK(isps.size() >= 4);
  CHECK_FALSE(resp.external.has_value());
}

TEST_CASE("stale peers must re-register") {
  auto t = make_tracker(4);
  CHECK_THROWS_AS(t.announce(req(7, 0, AnnounceEvent::periodic), 1), stale_peer_error);
  t.announce(req(7, 0, AnnounceEvent::started), 2);
  CHECK_NOTHROW(t.announce(req(7, 0, AnnounceEvent::periodic), 3));
  t.announce(req(7, 0, AnnounceEvent::stopped), 4);
  CHECK_THROWS_AS(t.announce(req(7, 0, AnnounceEvent::completed), 5), stale_peer_error);
}

TEST_CASE("property: budget ledger stays consistent under random traces") {
  Rng rng(123, 9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::uint64_t limit = 1 + rng.below(6);
    auto t = make_tracker(limit, trial % 2 == 1, false, 1000 + trial);
    const std::uint32_t n_isps = 2 + rng.below32(4);
    const std::uint32_t per_isp = 40;
    std::vector<bool> started(n_isps * per_isp, false);
    double now = 0;
    for (int ev = 0; ev < 500; ++ev) {
      now += rng.unit();
      std::uint32_t peer = rng.below32(n_isps * per_isp);
      std::uint32_t isp = peer / per_isp;
      AnnounceEvent kind;
      if (!started[peer]) {
        kind = AnnounceEvent::started;
        started[peer] = true;
      } else {
        double u = rng.unit();
        kind = u < 0.75   ? AnnounceEvent::periodic
               : u < 0.90 ? AnnounceEvent::completed
                          : AnnounceEvent::stopped;
        if (kind == AnnounceEvent::stopped) started[peer] = false;
      }
      t.announce(req(peer, isp, kind), now);
      for (std::uint32_t i = 0; i < n_isps; ++i) {
        REQUIRE(t.outgoing_count(i) <= limit);
        REQUIRE(t.outgoing_count(i) == t.recompute_outgoing(i));
      }
    }
  }
}

TEST_CASE("identical seed and trace give identical responses") {
  const std::string trace =
      "0 0 0 started 0\n"
      "0 1 0 started 0\n"
      "1 100 1 started 0\n"
      "1 101 1 started 0\n"
      "2 0 0 periodic 0\n"
      "3 200 2 started 0\n"
      "4 1 0 periodic 0\n"
      "5 0 0 completed 0\n";
  auto t1 = make_tracker(5, true, false, 42);
  auto t2 = make_tracker(5, true, false, 42);
  CHECK(dump_responses(replay_trace(t1, trace)) == dump_responses(replay_trace(t2, trace)));
  auto t3 = make_tracker(5, true, false, 43);
  // Different seed, same trace: sampling differs somewhere.
  CHECK(dump_responses(replay_trace(t1, trace)) != dump_responses(replay_trace(t3, trace)));
}

TEST_CASE("malformed trace lines are rejected with their line number") {
  auto t = make_tracker(4);
  try {
    replay_trace(t, "0 1 0 started 0\nnot a line\n");
    FAIL("expected config_error");
  } catch (const config_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(replay_trace(t, "0 1 0 frobbed 0\n"), config_error);
}

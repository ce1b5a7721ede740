#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>
#include <sstream>

#include "localswarm/scenario.hpp"

using namespace localswarm;

namespace {

// Independent serialization used only by tests to compare spec lists byte
// for byte.
std::string dump_specs(const std::vector<PeerSpec>& specs) {
  std::ostringstream o;
  o.precision(17);
  for (const auto& p : specs)
    o << p.peer << ' ' << p.isp << ' ' << p.max_upload << ' ' << p.arrival << ' '
      << int(p.initial_seed) << ' ' << int(p.churn_set) << '\n';
  return o.str();
}

}  // namespace

TEST_CASE("homogeneous layout splits peers evenly") {
  auto cfg = build_homogeneous(1000, 10, 20'000);
  REQUIRE(cfg.isp_counts.size() == 10);
  for (auto c : cfg.isp_counts) CHECK(c == 100);

  auto tiny = build_homogeneous(10, 10, 20'000);
  for (auto c : tiny.isp_counts) CHECK(c == 1);

  auto wide = build_homogeneous(10'000, 2, 20'000);
  for (auto c : wide.isp_counts) CHECK(c == 5000);

  CHECK_THROWS_AS(build_homogeneous(1000, 3, 20'000), config_error);
  CHECK_THROWS_AS(build_homogeneous(0, 1, 20'000), config_error);
}

TEST_CASE("heterogeneous layout gives equal thirds per ISP") {
  auto cfg = build_heterogeneous(990, 10);
  REQUIRE(cfg.classes.size() == 3);
  auto specs = build_peer_specs(cfg);

  std::map<std::uint32_t, std::map<double, int>> per_isp;
  for (const auto& p : specs)
    if (!p.initial_seed) per_isp[p.isp][p.max_upload]++;
  REQUIRE(per_isp.size() == 10);
  for (auto& [isp, by_rate] : per_isp) {
    REQUIRE(by_rate.size() == 3);
    CHECK(by_rate[20'000] == 33);
    CHECK(by_rate[50'000] == 33);
    CHECK(by_rate[100'000] == 33);
  }

  // Population mean of max uploads (initial seed excluded) is exactly the
  // class mean: (20000 + 50000 + 100000) / 3.
  double sum = 0;
  int n = 0;
  for (const auto& p : specs)
    if (!p.initial_seed) {
      sum += p.max_upload;
      n++;
    }
  CHECK(n == 990);
  CHECK(sum / n == Catch::Approx(170'000.0 / 3.0).epsilon(1e-12));

  // Initial seed runs at 100 kB/s.
  CHECK(specs.back().initial_seed);
  CHECK(specs.back().max_upload == 100'000);

  CHECK_THROWS_AS(build_heterogeneous(999, 10), config_error);
  // 30 peers / 10 ISPs = 3 per ISP: exactly one peer per class.
  auto small = build_heterogeneous(30, 10);
  auto sp = build_peer_specs(small);
  std::map<std::uint32_t, std::set<double>> rates;
  for (const auto& p : sp)
    if (!p.initial_seed) rates[p.isp].insert(p.max_upload);
  for (auto& [isp, r] : rates) CHECK(r.size() == 3);
}

TEST_CASE("distribution layout reproduces explicit AS counts") {
  // Shapes matching the reference crawl torrents.
  std::vector<std::pair<std::string, std::uint32_t>> ases;
  std::uint32_t total = 0;
  ases.push_back({"AS0", 386});
  total += 386;
  for (int i = 1; total < 9844; ++i) {
    std::uint32_t c = std::min<std::uint32_t>(9844 - total, (i % 17) + 1);
    ases.push_back({"AS" + std::to_string(i), c});
    total += c;
  }
  auto cfg = build_from_distribution(ases, 20'000);
  CHECK(cfg.torrent_size == 9844);
  CHECK(cfg.isp_counts.size() == ases.size());
  CHECK(cfg.isp_counts[0] == 386);

  auto single = build_from_distribution({{"A", 1}}, 20'000);
  CHECK(single.torrent_size == 1);
  CHECK(single.n_isps() == 1);

  CHECK_THROWS_AS(build_from_distribution({}, 20'000), config_error);
  CHECK_THROWS_AS(build_from_distribution({{"A", 0}}, 20'000), config_error);
}

TEST_CASE("peer specs: ids, ISP sums, arrival bounds") {
  auto cfg = build_homogeneous(1000, 10, 20'000);
  cfg.rng_seed = 7;
  auto specs = build_peer_specs(cfg);
  REQUIRE(specs.size() == 1001);

  std::vector<std::uint32_t> per_isp(11, 0);
  std::set<std::uint32_t> ids;
  for (const auto& p : specs) {
    per_isp[p.isp]++;
    ids.insert(p.peer);
    if (!p.initial_seed) {
      CHECK(p.arrival >= 0.0);
      CHECK(p.arrival <= cfg.arrival_window);
    }
  }
  CHECK(ids.size() == specs.size());  // ids unique
  for (int i = 0; i < 10; ++i) CHECK(per_isp[i] == 100);
  CHECK(per_isp[10] == 1);  // pseudo-ISP holds only the initial seed
}

TEST_CASE("rebuilding with the same seed is byte-identical") {
  auto cfg = build_heterogeneous(90, 3);
  cfg.rng_seed = 99;
  auto a = dump_specs(build_peer_specs(cfg));
  auto b = dump_specs(build_peer_specs(cfg));
  CHECK(a == b);
  cfg.rng_seed = 100;
  CHECK(a != dump_specs(build_peer_specs(cfg)));
}

TEST_CASE("churn schedule covers both windows and sentinel arrivals") {
  auto cfg = build_homogeneous(1000, 10, 20'000);
  cfg.churn_second_set = 1000;
  for (double window : {60.0, 6000.0}) {
    auto specs = churn_schedule(cfg, window);
    REQUIRE(specs.size() == 2001);
    int first = 0, second = 0;
    for (const auto& p : specs) {
      if (p.initial_seed) continue;
      if (p.churn_set == 0) {
        first++;
        CHECK(p.arrival >= 0.0);
        CHECK(p.arrival <= window);
      } else {
        second++;
        CHECK(p.arrival == kSecondSetArrival);
      }
    }
    CHECK(first == 1000);
    CHECK(second == 1000);
  }
  CHECK_THROWS_AS(churn_schedule(cfg, 0.0), config_error);
  auto no_churn = build_homogeneous(10, 1, 20'000);
  CHECK_THROWS_AS(churn_schedule(no_churn, 60.0), config_error);
}

TEST_CASE("a second set smaller than the first mirrors its layout cyclically") {
  auto cfg = build_homogeneous(10, 2, 20'000);
  cfg.churn_second_set = 3;
  auto specs = build_peer_specs(cfg);
  REQUIRE(specs.size() == cfg.n_peers_total());

  // Ids are dense and unique: 0..torrent_size-1 first set, then the second
  // set, then the seed as the last id.
  std::set<std::uint32_t> ids;
  for (const auto& p : specs) ids.insert(p.peer);
  REQUIRE(ids.size() == specs.size());
  CHECK(*ids.rbegin() == cfg.initial_seed_id());

  std::vector<const PeerSpec*> by_id(specs.size());
  for (const auto& p : specs) by_id[p.peer] = &p;
  for (std::uint32_t j = 0; j < cfg.churn_second_set; ++j) {
    const PeerSpec& second = *by_id[cfg.torrent_size + j];
    const PeerSpec& mirror = *by_id[j % cfg.torrent_size];
    CHECK(second.churn_set == 1);
    CHECK(second.arrival == kSecondSetArrival);
    CHECK(second.isp == mirror.isp);
    CHECK(second.max_upload == mirror.max_upload);
  }

  // A second set larger than the first wraps around the pattern.
  cfg.churn_second_set = 25;
  auto wrapped = build_peer_specs(cfg);
  REQUIRE(wrapped.size() == cfg.n_peers_total());
  std::vector<const PeerSpec*> by_id2(wrapped.size());
  for (const auto& p : wrapped) by_id2[p.peer] = &p;
  for (std::uint32_t j = 0; j < cfg.churn_second_set; ++j)
    CHECK(by_id2[cfg.torrent_size + j]->isp == by_id2[j % cfg.torrent_size]->isp);
}

TEST_CASE("validation rejects inconsistent configs") {
  auto cfg = build_homogeneous(100, 10, 20'000);
  SECTION("content must be an exact multiple of piece size") {
    cfg.piece_size = 256'000;  // does not divide 10^8
    CHECK_THROWS_AS(cfg.validate(), config_error);
  }
  SECTION("fractions must sum to one") {
    cfg.classes = {{20'000, 1, 3}, {50'000, 1, 3}};
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg.classes = {{20'000, 1, 3}, {50'000, 1, 3}, {100'000, 1, 3}};
    CHECK_NOTHROW(cfg.validate());
  }
  SECTION("locality needs a limit") {
    cfg.policy.kind = PolicyKind::locality;
    cfg.policy.limit = 0;
    CHECK_THROWS_AS(cfg.validate(), config_error);
  }
  SECTION("partition isp must exist") {
    cfg.partition_isp = 10;
    CHECK_THROWS_AS(cfg.validate(), config_error);
  }
}

TEST_CASE("scenario files parse, validate and hash stably") {
  const std::string text =
      "# demo scenario\n"
      "peers = 990\n"
      "isps = 10\n"
      "content = 100000000\n"
      "piece = 250000\n"
      "seed_rate = 100000\n"
      "upload = 20000:1/3, 50000:1/3, 100000:1/3\n"
      "policy = locality\n"
      "limit = 4\n"
      "rr = on\n"
      "pm = off\n"
      "arrival_window = 60\n"
      "seed = 42\n";
  auto cfg = parse_scenario(text);
  CHECK(cfg.torrent_size == 990);
  CHECK(cfg.n_isps() == 10);
  CHECK(cfg.policy.kind == PolicyKind::locality);
  CHECK(cfg.policy.limit == 4);
  CHECK(cfg.policy.round_robin);
  CHECK_FALSE(cfg.policy.partition_merge);
  CHECK(cfg.classes.size() == 3);
  CHECK(cfg.rng_seed == 42);
  CHECK(cfg.canonical() == parse_scenario(text).canonical());

  SECTION("unknown keys are rejected with the line number") {
    try {
      parse_scenario(text + "bogus_key = 1\n");
      FAIL("expected config_error");
    } catch (const config_error& e) {
      CHECK(std::string(e.what()).find("line 14") != std::string::npos);
      CHECK(std::string(e.what()).find("bogus_key") != std::string::npos);
    }
  }
  SECTION("explicit isp_counts derive the peer total") {
    auto c2 = parse_scenario("isp_counts = A:3, B:5\nupload = 20000\narrival_window = 0\n");
    CHECK(c2.torrent_size == 8);
    REQUIRE(c2.n_isps() == 2);
    CHECK(c2.isp_names[0] == "A");
    CHECK(c2.isp_counts[1] == 5);
  }
  SECTION("sweep keys are ignored by the scenario layer") {
    CHECK_NOTHROW(parse_scenario(text + "sweep_axis = connection_limit\n"));
  }
  SECTION("non-divisible even layout is rejected") {
    CHECK_THROWS_AS(parse_scenario("peers = 999\nisps = 10\n"), config_error);
  }
}

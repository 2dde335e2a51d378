#include "freescale/partition.hpp"

#include <numeric>

#include "doctest.h"
#include "freescale/rng.hpp"

using namespace freescale;
using namespace freescale::partition;

namespace {

std::vector<GlobalSampleMeta> metas_from_lengths(const std::vector<std::uint64_t>& lengths,
                                                 int num_ranks) {
  std::vector<GlobalSampleMeta> metas(lengths.size());
  const std::size_t per_rank = num_ranks > 0 ? (lengths.size() + num_ranks - 1) / num_ranks : 1;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    metas[i].origin_rank = static_cast<int>(i / per_rank);
    metas[i].local_index = static_cast<int>(i % per_rank);
    metas[i].uih_len = lengths[i];
  }
  return metas;
}

std::vector<std::uint64_t> rank_token_totals(const PartitionPlan& plan,
                                             std::span<const GlobalSampleMeta> metas) {
  std::vector<std::uint64_t> totals(plan.receive_order.size(), 0);
  for (std::size_t r = 0; r < plan.receive_order.size(); ++r) {
    for (std::size_t g : plan.receive_order[r]) totals[r] += metas[g].uih_len;
  }
  return totals;
}

}  // namespace

TEST_SUITE("partition") {

TEST_CASE("fbs snake on four sorted lengths") {
  auto metas = metas_from_lengths({9, 7, 5, 3}, 2);
  auto plan = fbs_partition(metas, 2);
  plan.validate(4, true);
  auto totals = rank_token_totals(plan, metas);
  // rank0 <- {9,3}, rank1 <- {7,5}
  CHECK(totals == std::vector<std::uint64_t>{12, 12});
  // brute force over all equal-size 2-partitions confirms 12/12 is max-min optimal
}

TEST_CASE("fbs single rank keeps everything, sorted") {
  auto metas = metas_from_lengths({3, 9, 1}, 1);
  auto plan = fbs_partition(metas, 1);
  plan.validate(3, true);
  REQUIRE(plan.receive_order.size() == 1);
  CHECK(plan.receive_order[0] == std::vector<std::size_t>{1, 0, 2});
}

TEST_CASE("fbs equal lengths split tokens exactly") {
  auto metas = metas_from_lengths(std::vector<std::uint64_t>(12, 7), 3);
  auto plan = fbs_partition(metas, 3);
  for (auto t : rank_token_totals(plan, metas)) CHECK(t == 28);
}

TEST_CASE("fbs rejects indivisible sample counts") {
  auto metas = metas_from_lengths({1, 2, 3}, 2);
  CHECK_THROWS_AS(fbs_partition(metas, 2), std::invalid_argument);
}

TEST_CASE("vbs picks the optimal contiguous split") {
  auto metas = metas_from_lengths({4, 3, 2, 1}, 2);
  auto plan = vbs_partition(metas, 2, 1.0);
  plan.validate(4, false);
  CHECK(plan_max_weight(plan, metas, 1.0) == doctest::Approx(6.0));
  // split is [4] | [3,2,1]
  CHECK(plan.receive_order[0].size() == 1);
  CHECK(plan.receive_order[1].size() == 3);
}

TEST_CASE("vbs symmetric weights split evenly") {
  auto metas = metas_from_lengths({3, 3, 3, 3}, 2);
  auto plan = vbs_partition(metas, 2, 2.0);
  CHECK(plan.receive_order[0].size() == 2);
  CHECK(plan.receive_order[1].size() == 2);
  CHECK(plan_max_weight(plan, metas, 2.0) == doctest::Approx(18.0));
}

TEST_CASE("vbs one sample per rank at the boundary") {
  auto metas = metas_from_lengths({5, 4, 3}, 3);
  auto plan = vbs_partition(metas, 3, 1.0);
  for (const auto& o : plan.receive_order) CHECK(o.size() == 1);
}

TEST_CASE("vbs rejects more ranks than samples") {
  auto metas = metas_from_lengths({5, 4}, 2);
  CHECK_THROWS_AS(vbs_partition(metas, 3, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(vbs_partition(metas, 2, 0.0), std::invalid_argument);
}

TEST_CASE("vbs DP equals exhaustive search on small instances") {
  std::uint64_t rng = 31337;
  for (int round = 0; round < 500; ++round) {
    const int m = 2 + static_cast<int>(rng_below(rng, 11));  // 2..12 samples
    const int n = 1 + static_cast<int>(rng_below(rng, static_cast<std::uint64_t>(m)));
    std::vector<std::uint64_t> lengths(static_cast<std::size_t>(m));
    for (auto& l : lengths) l = rng_below(rng, 100);
    auto metas = metas_from_lengths(lengths, n);
    const double alpha = 1.0 + static_cast<double>(rng_below(rng, 3));
    auto plan = vbs_partition(metas, n, alpha);
    // oracle works on the same sorted order the planner uses
    std::vector<double> weights;
    for (std::size_t k = 0; k < plan.receive_order.size(); ++k) {
      for (std::size_t g : plan.receive_order[k]) {
        weights.push_back(std::pow(static_cast<double>(metas[g].uih_len), alpha));
      }
    }
    const double brute = min_max_contiguous_bruteforce(weights, n);
    CHECK(plan_max_weight(plan, metas, alpha) == doctest::Approx(brute).epsilon(1e-12));
  }
}

TEST_CASE("autotune fixed point and hand example") {
  AutoTuneState tune;
  tune.local_batch_size = {4, 4};
  tune.ema_local = {0, 0};
  tune.initialized = true;

  SUBCASE("equal times change nothing") {
    autotune_update(tune, std::vector<double>{10, 10});
    CHECK(tune.local_batch_size == std::vector<int>{4, 4});
  }
  SUBCASE("slow rank donates one sample to the fast rank") {
    autotune_update(tune, std::vector<double>{12, 8});
    CHECK(tune.local_batch_size == std::vector<int>{3, 5});
  }
  SUBCASE("clamped rank stays at one sample") {
    tune.local_batch_size = {1, 7};
    autotune_update(tune, std::vector<double>{20, 1});
    CHECK(tune.local_batch_size[0] == 1);
    CHECK(tune.local_batch_size[0] + tune.local_batch_size[1] == 8);
  }
}

TEST_CASE("autotune conserves the global batch under fuzzing") {
  std::uint64_t rng = 7;
  AutoTuneState tune;
  tune.local_batch_size = {8, 8, 8, 8};
  tune.ema_local = {0, 0, 0, 0};
  tune.initialized = true;
  for (int round = 0; round < 300; ++round) {
    std::vector<double> times(4);
    for (auto& t : times) t = 1.0 + rng_double(rng) * 20.0;
    autotune_update(tune, times);
    CHECK(std::accumulate(tune.local_batch_size.begin(), tune.local_batch_size.end(), 0) == 32);
    for (int b : tune.local_batch_size) CHECK(b >= 1);
  }
}

TEST_CASE("vbs honors tuned batch sizes once initialized") {
  auto metas = metas_from_lengths({9, 8, 7, 6, 5, 4, 3, 2}, 2);
  AutoTuneState tune;
  auto first = vbs_partition(metas, 2, 1.0, &tune);
  CHECK(tune.initialized);
  tune.local_batch_size = {2, 6};
  auto plan = vbs_partition(metas, 2, 1.0, &tune);
  CHECK(plan.receive_order[0].size() == 2);
  CHECK(plan.receive_order[1].size() == 6);
}

TEST_CASE("custom partitioner: identity, round-robin and a broken one") {
  auto metas = metas_from_lengths({4, 3, 2, 1}, 2);

  auto identity = custom_partition(
      [](std::span<const GlobalSampleMeta> m, int n) { return identity_partition(m, n); }, metas,
      2);
  CHECK(identity.receive_order[0] == std::vector<std::size_t>{0, 1});
  CHECK(identity.receive_order[1] == std::vector<std::size_t>{2, 3});

  auto round_robin = custom_partition(
      [](std::span<const GlobalSampleMeta> m, int n) {
        PartitionPlan p;
        p.num_ranks = n;
        p.assignment.resize(m.size());
        p.receive_order.resize(static_cast<std::size_t>(n));
        for (std::size_t g = 0; g < m.size(); ++g) {
          const int dst = static_cast<int>(g) % n;
          p.assignment[g] = dst;
          p.receive_order[static_cast<std::size_t>(dst)].push_back(g);
        }
        return p;
      },
      metas, 2);
  CHECK(round_robin.receive_order[0] == std::vector<std::size_t>{0, 2});
  CHECK(round_robin.receive_order[1] == std::vector<std::size_t>{1, 3});

  CHECK_THROWS_WITH_AS(custom_partition(
                           [](std::span<const GlobalSampleMeta> m, int n) {
                             PartitionPlan p;
                             p.num_ranks = n;
                             p.assignment.assign(m.size(), 0);
                             p.receive_order.resize(static_cast<std::size_t>(n));
                             for (std::size_t g = 0; g + 1 < m.size(); ++g) {
                               p.receive_order[0].push_back(g);  // drops the last sample
                             }
                             return p;
                           },
                           metas, 2),
                       doctest::Contains("not assigned"), std::invalid_argument);
}

TEST_CASE("plans conserve the sample multiset (fuzzed)") {
  std::uint64_t rng = 55;
  for (int round = 0; round < 100; ++round) {
    const int n = 1 + static_cast<int>(rng_below(rng, 8));
    const int B = 1 + static_cast<int>(rng_below(rng, 16));
    std::vector<std::uint64_t> lengths(static_cast<std::size_t>(n * B));
    for (auto& l : lengths) l = rng_below(rng, 1000);
    auto metas = metas_from_lengths(lengths, n);
    auto plan = fbs_partition(metas, n);
    CHECK_NOTHROW(plan.validate(metas.size(), true));
    auto vplan = vbs_partition(metas, n, 1.0);
    CHECK_NOTHROW(vplan.validate(metas.size(), false));
    // exchange lists are mutually consistent with the receive order
    auto lists = plan.exchange_lists(metas);
    std::size_t exchanged = 0;
    for (const auto& per_src : lists) {
      for (const auto& to_dst : per_src) exchanged += to_dst.size();
    }
    CHECK(exchanged == metas.size());
  }
}

TEST_CASE("fbs beats random assignment on the max/min token ratio") {
  std::uint64_t rng = 4242;
  const int n = 8, B = 64;
  int fbs_wins = 0, spread_ok = 0;
  const int trials = 200;
  for (int trial = 0; trial < trials; ++trial) {
    // heavy-tail lengths, truncated the way real batches are
    std::vector<std::uint64_t> lengths(static_cast<std::size_t>(n * B));
    for (auto& l : lengths) {
      l = std::min<std::uint64_t>(
          static_cast<std::uint64_t>(std::llround(std::exp(7.0 + 1.2 * rng_normal(rng)))), 21000);
    }
    auto metas = metas_from_lengths(lengths, n);
    auto plan = fbs_partition(metas, n);
    auto fbs_totals = rank_token_totals(plan, metas);

    std::vector<std::uint64_t> random_totals(n, 0);
    std::vector<std::size_t> shuffled(lengths.size());
    std::iota(shuffled.begin(), shuffled.end(), 0);
    rng_shuffle(rng, shuffled);
    for (std::size_t i = 0; i < shuffled.size(); ++i) {
      random_totals[i % n] += lengths[shuffled[i]];
    }
    auto ratio = [](const std::vector<std::uint64_t>& v) {
      auto [mn, mx] = std::minmax_element(v.begin(), v.end());
      return *mn == 0 ? 1e18 : static_cast<double>(*mx) / static_cast<double>(*mn);
    };
    if (ratio(fbs_totals) < ratio(random_totals)) ++fbs_wins;
    auto [mn, mx] = std::minmax_element(fbs_totals.begin(), fbs_totals.end());
    double mean = std::accumulate(fbs_totals.begin(), fbs_totals.end(), 0.0) / n;
    if (static_cast<double>(*mx - *mn) / mean <= 0.1) ++spread_ok;
  }
  CHECK(fbs_wins >= trials * 95 / 100);
  CHECK(spread_ok >= trials * 90 / 100);
}

}  // TEST_SUITE

#include "freescale/config.hpp"

#include "doctest.h"
#include "freescale/experiments.hpp"

using namespace freescale;
using namespace freescale::config;

TEST_SUITE("config") {

TEST_CASE("sections prefix keys and comments are stripped") {
  auto kv = KeyValues::parse_string(
      "# top comment\n"
      "mode = prioritized\n"
      "alpha = 2.0   # inline comment\n"
      "[balancer]\n"
      "enabled = true\n"
      "partition = vbs\n");
  CHECK(kv.get_str("mode", "") == "prioritized");
  CHECK(kv.get_f64("alpha", 0) == doctest::Approx(2.0));
  CHECK(kv.get_bool("balancer.enabled", false));
  CHECK(kv.get_str("balancer.partition", "") == "vbs");
}

TEST_CASE("typed getters validate their input") {
  auto kv = KeyValues::parse_string("a = 12\nb = x\nc = 1,2.5,3\n");
  CHECK(kv.get_i64("a", 0) == 12);
  CHECK_THROWS_AS(kv.get_i64("b", 0), ConfigError);
  CHECK_THROWS_AS(kv.get_bool("b", false), ConfigError);
  CHECK(kv.get_list("c") == std::vector<double>{1, 2.5, 3});
  CHECK(kv.get_i64("missing", 7) == 7);
}

TEST_CASE("unknown keys are rejected by name") {
  auto kv = KeyValues::parse_string("good = 1\ntypo_key = 2\n");
  const std::vector<std::string> known = {"good"};
  CHECK_THROWS_WITH_AS(kv.validate_keys(known), doctest::Contains("typo_key"), ConfigError);
}

TEST_CASE("overrides win over file values") {
  auto kv = KeyValues::parse_string("mode = synchronized\n");
  kv.set("mode", "prioritized");
  CHECK(kv.get_str("mode", "") == "prioritized");
}

TEST_CASE("malformed lines raise with the line number") {
  CHECK_THROWS_WITH_AS(KeyValues::parse_string("just a token\n"), doctest::Contains("line 1"),
                       ConfigError);
  CHECK_THROWS_AS(KeyValues::parse_string("[unterminated\n"), ConfigError);
}

}  // TEST_SUITE

TEST_SUITE("experiments") {

TEST_CASE("zero payloads cost exactly the latency term per stage") {
  comm::LinkParams link;
  link.latency_us = 5.0;
  const std::size_t sizes[] = {0};
  auto points = experiments::bench_ring_all_gather(4, sizes, link);
  REQUIRE(points.size() == 1);
  CHECK(points[0].fused_us == doctest::Approx(3 * 5.0));  // p-1 stages
  CHECK(points[0].sm_free_us == doctest::Approx(3 * 5.0));
}

TEST_CASE("doubling the payload doubles the transmission term when bandwidth-bound") {
  comm::LinkParams link;
  link.latency_us = 0.0;
  link.bandwidth_bytes_per_us = 1000.0;
  const std::size_t sizes[] = {1 << 16, 1 << 17};
  auto points = experiments::bench_ring_all_gather(3, sizes, link);
  REQUIRE(points.size() == 2);
  CHECK(points[1].fused_us == doctest::Approx(2 * points[0].fused_us).epsilon(1e-9));
}

TEST_CASE("straggler trend harness separates imbalanced and balanced runs") {
  workload::WorkloadSpec spec;
  spec.num_ranks = 8;
  spec.batch_size = 16;
  spec.max_uih = 4096;
  spec.dist = workload::DistSpec::log_normal(6.0, 1.2);
  spec.table_rows = 1 << 18;
  spec.seed = 3;
  spec.num_iterations = 4;
  sim::CostModel cost;
  cost.c0 = 10;
  cost.c1 = 0.01;
  auto trend = experiments::straggler_trend(spec, cost);
  CHECK(trend.iterations == 4);
  CHECK(trend.baseline_straggler > trend.fbs_straggler);
  CHECK(trend.mean_sparsity > 0);
  CHECK(trend.mean_sparsity < 1);
}

}  // TEST_SUITE

#include "freescale/workload.hpp"

#include <unistd.h>

#include <cstdio>
#include <fstream>

#include "doctest.h"

using namespace freescale;
using namespace freescale::workload;

namespace {

WorkloadSpec small_spec() {
  WorkloadSpec s;
  s.num_ranks = 2;
  s.batch_size = 4;
  s.max_uih = 16;
  s.dist = DistSpec::uniform(2, 10);
  s.table_rows = 4096;
  s.seed = 42;
  s.num_iterations = 5;
  return s;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/fs_test_") + name + "_" + std::to_string(::getpid()) + ".bin";
}

}  // namespace

TEST_SUITE("workload") {

TEST_CASE("degenerate uniform distribution pins every length") {
  WorkloadSpec s = small_spec();
  s.dist = DistSpec::uniform(5, 5);
  auto iters = generate_all(s);
  for (const auto& it : iters) {
    for (const auto& b : it) {
      for (const auto& sample : b.samples) CHECK(sample.uih.size() == 5);
    }
  }
}

TEST_CASE("lengths never exceed max_uih") {
  WorkloadSpec s = small_spec();
  s.dist = DistSpec::log_normal(3.0, 1.0);
  s.max_uih = 12;
  s.num_iterations = 10;
  for (const auto& it : generate_all(s)) {
    for (const auto& b : it) {
      for (const auto& sample : b.samples) CHECK(sample.uih.size() <= 12);
    }
  }
}

TEST_CASE("generation is deterministic in the seed") {
  WorkloadSpec s = small_spec();
  auto a = generate_all(s);
  auto b = generate_all(s);
  CHECK(a == b);
  s.seed += 1;
  CHECK(generate_all(s) != a);
}

TEST_CASE("collision ratio 1.0 reuses the unique row set") {
  WorkloadSpec s = small_spec();
  s.dist = DistSpec::uniform(8, 8);  // constant demand so the pool is stable
  s.target_collision = 1.0;
  auto iters = generate_all(s);
  auto u0 = unique_rows(iters[0]);
  for (std::size_t i = 1; i < iters.size(); ++i) {
    auto ui = unique_rows(iters[i]);
    CHECK(ui == u0);
    CHECK(collision_fraction(u0, ui) == 1.0);
  }
}

TEST_CASE("collision ratio 0.0 gives disjoint consecutive row sets") {
  WorkloadSpec s = small_spec();
  s.target_collision = 0.0;
  s.table_rows = 1 << 16;
  auto iters = generate_all(s);
  for (std::size_t i = 1; i < iters.size(); ++i) {
    CHECK(collision_fraction(unique_rows(iters[i - 1]), unique_rows(iters[i])) == 0.0);
  }
}

TEST_CASE("measured collision tracks the target within 0.02 over 20 iterations") {
  for (double target : {0.0, 0.25, 0.5, 1.0}) {
    WorkloadSpec s = small_spec();
    s.num_ranks = 4;
    s.batch_size = 16;
    s.dist = DistSpec::uniform(4, 24);
    s.max_uih = 32;
    s.table_rows = 1 << 18;
    s.target_collision = target;
    s.num_iterations = 21;
    auto iters = generate_all(s);
    double total = 0;
    for (std::size_t i = 1; i < iters.size(); ++i) {
      total += collision_fraction(unique_rows(iters[i - 1]), unique_rows(iters[i]));
    }
    const double mean = total / static_cast<double>(iters.size() - 1);
    CHECK(std::abs(mean - target) <= 0.02);
  }
}

TEST_CASE("tiny table cannot honor a zero collision target") {
  WorkloadSpec s = small_spec();
  s.dist = DistSpec::uniform(16, 16);
  s.max_uih = 16;
  s.target_collision = 0.0;
  s.table_rows = 40;  // pool is 32 per iteration; disjoint pools need 64
  Generator gen(s);
  gen.next_iteration();
  CHECK_THROWS_AS(gen.next_iteration(), ConfigError);
}

TEST_CASE("empirical histogram draws only listed lengths at the right odds") {
  WorkloadSpec s = small_spec();
  s.dist = DistSpec::empirical({0, 0, 1, 2});  // lengths 2 and 3, 3 twice as likely
  s.num_iterations = 40;
  std::size_t twos = 0, threes = 0;
  for (const auto& it : generate_all(s)) {
    for (const auto& b : it) {
      for (const auto& sample : b.samples) {
        REQUIRE((sample.uih.size() == 2 || sample.uih.size() == 3));
        (sample.uih.size() == 2 ? twos : threes) += 1;
      }
    }
  }
  CHECK(threes > twos);
  CHECK_THROWS_AS(Generator(WorkloadSpec{.dist = DistSpec::empirical({0, 0})}), ConfigError);
}

TEST_CASE("sparsity hand values") {
  CHECK(measure_sparsity(std::vector<std::uint64_t>{4, 4, 4}) == 0.0);
  CHECK(measure_sparsity(std::vector<std::uint64_t>{2, 4}) == doctest::Approx(0.25));
  CHECK(measure_sparsity(std::vector<std::uint64_t>{1, 1, 1, 21000}) ==
        doctest::Approx(1.0 - 21003.0 / 84000.0));
  CHECK_THROWS_AS(measure_sparsity(std::vector<std::uint64_t>{0, 0}), std::invalid_argument);
}

TEST_CASE("file round trip is lossless") {
  WorkloadSpec s = small_spec();
  auto iters = generate_all(s);
  const std::string path = temp_path("roundtrip");
  save_workload(path, s, iters);
  auto [spec2, iters2] = load_workload(path);
  CHECK(spec2 == s);
  CHECK(iters2 == iters);
  // byte-for-byte reproducible
  save_workload(path + ".b", s, iters);
  std::ifstream f1(path, std::ios::binary), f2(path + ".b", std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(c1 == c2);
  std::remove(path.c_str());
  std::remove((path + ".b").c_str());
}

TEST_CASE("empty workload file loads as an empty stream") {
  WorkloadSpec s = small_spec();
  s.num_iterations = 0;
  const std::string path = temp_path("empty");
  save_workload(path, s, {});
  auto [spec2, iters2] = load_workload(path);
  CHECK(iters2.empty());
  std::remove(path.c_str());
}

TEST_CASE("truncated file reports the last complete record") {
  WorkloadSpec s = small_spec();
  s.num_iterations = 2;
  auto iters = generate_all(s);
  const std::string path = temp_path("trunc");
  save_workload(path, s, iters);
  // chop the tail off
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  bytes.resize(bytes.size() - 13);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  Reader r(path);
  CHECK_THROWS_WITH_AS(
      [&] {
        while (r.has_next()) r.next_iteration();
      }(),
      doctest::Contains("last complete record"), IoError);
  std::remove(path.c_str());
}

}  // TEST_SUITE

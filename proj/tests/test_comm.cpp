#include "freescale/comm.hpp"

#include <atomic>

#include "doctest.h"
#include "freescale/rng.hpp"
#include "freescale/tcp.hpp"

using namespace freescale;
using namespace freescale::comm;

namespace {

Bytes bytes_of(std::initializer_list<std::uint8_t> v) { return Bytes(v); }

Bytes random_bytes(std::uint64_t& rng, std::size_t max_len) {
  Bytes b(rng_below(rng, max_len + 1));
  for (auto& x : b) x = static_cast<std::uint8_t>(rng_next(rng));
  return b;
}

// Reference gather: what every rank must hold afterwards.
std::vector<Bytes> reference_gather(const std::vector<Bytes>& inputs) { return inputs; }

}  // namespace

TEST_SUITE("comm") {

TEST_CASE("all_gather equals the reference gather") {
  const int p = 4;
  std::uint64_t rng = 1;
  std::vector<Bytes> inputs;
  for (int r = 0; r < p; ++r) inputs.push_back(random_bytes(rng, 64));
  InProcessFabric fabric(p);
  std::vector<std::vector<Bytes>> results(p);
  fabric.run([&](int r) {
    Communicator comm(fabric.transport(r));
    results[static_cast<std::size_t>(r)] = comm.all_gather(inputs[static_cast<std::size_t>(r)], {});
  });
  for (int r = 0; r < p; ++r) CHECK(results[static_cast<std::size_t>(r)] == reference_gather(inputs));
}

TEST_CASE("all_gather with one rank is the identity") {
  InProcessFabric fabric(1);
  fabric.run([&](int r) {
    Communicator comm(fabric.transport(r));
    auto out = comm.all_gather(bytes_of({1, 2, 3}), {});
    CHECK(out == std::vector<Bytes>{bytes_of({1, 2, 3})});
  });
}

TEST_CASE("ring all_gather hand trace for p=3 and swap for p=2") {
  for (int p : {2, 3}) {
    std::vector<Bytes> inputs;
    std::vector<std::uint64_t> sizes;
    for (int r = 0; r < p; ++r) {
      inputs.push_back(bytes_of({static_cast<std::uint8_t>('A' + r)}));
      sizes.push_back(1);
    }
    InProcessFabric fabric(p);
    std::vector<std::vector<Bytes>> results(p);
    fabric.run([&](int r) {
      Communicator comm(fabric.transport(r));
      results[static_cast<std::size_t>(r)] =
          comm.ring_all_gather(inputs[static_cast<std::size_t>(r)], sizes, {});
    });
    for (int r = 0; r < p; ++r) CHECK(results[static_cast<std::size_t>(r)] == inputs);
  }
}

TEST_CASE("ring all_gather bitwise equals all_gather over fuzzed payloads") {
  std::uint64_t rng = 99;
  for (int p = 2; p <= 8; ++p) {
    for (int round = 0; round < 8; ++round) {
      std::vector<Bytes> inputs;
      std::vector<std::uint64_t> sizes;
      for (int r = 0; r < p; ++r) {
        inputs.push_back(random_bytes(rng, 257));
        sizes.push_back(inputs.back().size());
      }
      InProcessFabric fabric(p);
      std::vector<std::vector<Bytes>> ring(p), direct(p);
      fabric.run([&](int r) {
        Communicator comm(fabric.transport(r));
        ring[static_cast<std::size_t>(r)] =
            comm.ring_all_gather(inputs[static_cast<std::size_t>(r)], sizes, {});
        direct[static_cast<std::size_t>(r)] = comm.all_gather(inputs[static_cast<std::size_t>(r)], {});
      });
      for (int r = 0; r < p; ++r) {
        CHECK(ring[static_cast<std::size_t>(r)] == direct[static_cast<std::size_t>(r)]);
      }
    }
  }
}

TEST_CASE("ring all_gather sends exactly p*(p-1) point-to-point messages") {
  for (int p : {2, 4, 7}) {
    std::vector<std::uint64_t> sizes(static_cast<std::size_t>(p), 8);
    InProcessFabric fabric(p);
    fabric.run([&](int r) {
      Communicator comm(fabric.transport(r));
      Bytes chunk(8, static_cast<std::uint8_t>(r));
      comm.ring_all_gather(chunk, sizes, {});
    });
    CHECK(fabric.message_count() == static_cast<std::uint64_t>(p) * (p - 1));
  }
}

TEST_CASE("all_to_all transposes send slots") {
  // rank0 sends [x->0, y->1], rank1 sends [u->0, v->1]
  InProcessFabric fabric(2);
  std::vector<std::vector<Bytes>> results(2);
  fabric.run([&](int r) {
    Communicator comm(fabric.transport(r));
    std::vector<Bytes> send =
        r == 0 ? std::vector<Bytes>{bytes_of({'x'}), bytes_of({'y'})}
               : std::vector<Bytes>{bytes_of({'u'}), bytes_of({'v'})};
    results[static_cast<std::size_t>(r)] = comm.all_to_all(send, {});
  });
  CHECK(results[0] == std::vector<Bytes>{bytes_of({'x'}), bytes_of({'u'})});
  CHECK(results[1] == std::vector<Bytes>{bytes_of({'y'}), bytes_of({'v'})});
}

TEST_CASE("all_to_all empty payloads and single rank") {
  InProcessFabric fabric(3);
  fabric.run([&](int r) {
    Communicator comm(fabric.transport(r));
    auto out = comm.all_to_all(std::vector<Bytes>(3), {});
    for (const auto& b : out) CHECK(b.empty());
  });
  InProcessFabric solo(1);
  solo.run([&](int r) {
    Communicator comm(solo.transport(r));
    auto out = comm.all_to_all({bytes_of({9})}, {});
    CHECK(out == std::vector<Bytes>{bytes_of({9})});
  });
}

TEST_CASE("all_to_all applied twice with transposed layout is the identity (fuzzed)") {
  std::uint64_t rng = 5150;
  for (int round = 0; round < 20; ++round) {
    const int p = 2 + static_cast<int>(rng_below(rng, 5));
    std::vector<std::vector<Bytes>> sends(static_cast<std::size_t>(p));
    for (auto& per_dst : sends) {
      per_dst.resize(static_cast<std::size_t>(p));
      for (auto& b : per_dst) b = random_bytes(rng, 32);
    }
    InProcessFabric fabric(p);
    std::vector<std::vector<Bytes>> twice(static_cast<std::size_t>(p));
    fabric.run([&](int r) {
      Communicator comm(fabric.transport(r));
      auto once = comm.all_to_all(sends[static_cast<std::size_t>(r)], {});
      twice[static_cast<std::size_t>(r)] = comm.all_to_all(once, {});
    });
    CHECK(twice == sends);
  }
}

TEST_CASE("all_reduce_sum hand values and determinism across runs") {
  auto run_once = [] {
    InProcessFabric fabric(2);
    std::vector<std::vector<double>> results(2);
    fabric.run([&](int r) {
      Communicator comm(fabric.transport(r));
      std::vector<double> local = r == 0 ? std::vector<double>{1, 2} : std::vector<double>{3, 4};
      results[static_cast<std::size_t>(r)] = comm.all_reduce_sum(local, {});
    });
    return results;
  };
  auto first = run_once();
  CHECK(first[0] == std::vector<double>{4, 6});
  CHECK(first[0] == first[1]);
  for (int i = 0; i < 9; ++i) CHECK(run_once() == first);
}

TEST_CASE("all_reduce_sum length mismatch raises on every rank") {
  InProcessFabric fabric(2);
  std::atomic<int> failures{0};
  CHECK_THROWS_AS(fabric.run([&](int r) {
    Communicator comm(fabric.transport(r));
    std::vector<double> local(r == 0 ? 2 : 3, 1.0);
    try {
      comm.all_reduce_sum(local, {});
    } catch (const CollectiveError&) {
      failures.fetch_add(1);
      throw;
    }
  }),
                  CollectiveError);
  CHECK(failures.load() == 2);
}

TEST_CASE("simulated logical timestamps are identical across repeated runs") {
  auto run_once = [] {
    InProcessFabric fabric(4);
    std::vector<double> finish(4);
    fabric.run([&](int r) {
      RankClock clock;
      Communicator comm(fabric.transport(r), &clock);
      comm.log_compute(10.0 * (r + 1));
      Bytes payload(1024 * static_cast<std::size_t>(r + 1), 0);
      comm.all_gather(payload, {});
      std::vector<Bytes> send(4, Bytes(64, 1));
      comm.all_to_all(send, {});
      finish[static_cast<std::size_t>(r)] = clock.main_time();
    });
    return finish;
  };
  auto first = run_once();
  for (int i = 0; i < 5; ++i) {
    auto again = run_once();
    CHECK(again == first);  // bitwise
  }
}

TEST_CASE("staged hops pay the copy cost, fused hops do not") {
  LinkParams link;
  link.latency_us = 5.0;
  link.bandwidth_bytes_per_us = 1000.0;
  link.copy_cost_us_per_mb = 1e6;  // 1 µs per byte, both directions
  InProcessFabric fabric(2, link);
  std::vector<double> fused_time(2), staged_time(2);
  fabric.run([&](int r) {
    RankClock clock;
    Communicator comm(fabric.transport(r), &clock);
    Bytes chunk(100, 7);
    std::vector<std::uint64_t> sizes{100, 100};
    CollectiveOptions fused;
    fused.mode = CollectiveMode::Fused;
    comm.ring_all_gather(chunk, sizes, fused);
    fused_time[static_cast<std::size_t>(r)] = clock.main_time();
    CollectiveOptions staged;
    staged.mode = CollectiveMode::SmFree;
    comm.ring_all_gather(chunk, sizes, staged);
    staged_time[static_cast<std::size_t>(r)] = clock.main_time() - fused_time[static_cast<std::size_t>(r)];
  });
  // one stage: latency 5 + 100/1000 bw = 5.1 fused; staged adds 2*100*1 = 200
  CHECK(fused_time[0] == doctest::Approx(5.1));
  CHECK(staged_time[0] == doctest::Approx(205.1));
}

TEST_CASE("tcp transport round-trips collectives over localhost") {
  const int p = 3;
  auto peers = local_peer_table(p, static_cast<std::uint16_t>(38100 + (::getpid() % 500) * 3));
  std::vector<std::unique_ptr<TcpTransport>> transports(static_cast<std::size_t>(p));
  std::vector<std::thread> setup;
  for (int r = 0; r < p; ++r) {
    setup.emplace_back([&, r] {
      transports[static_cast<std::size_t>(r)] = std::make_unique<TcpTransport>(r, peers);
    });
  }
  for (auto& t : setup) t.join();

  std::uint64_t rng = 7;
  std::vector<Bytes> inputs;
  for (int r = 0; r < p; ++r) inputs.push_back(random_bytes(rng, 512));

  std::vector<std::vector<Bytes>> gathered(static_cast<std::size_t>(p));
  std::vector<std::thread> workers;
  for (int r = 0; r < p; ++r) {
    workers.emplace_back([&, r] {
      Communicator comm(*transports[static_cast<std::size_t>(r)]);
      gathered[static_cast<std::size_t>(r)] = comm.all_gather(inputs[static_cast<std::size_t>(r)], {});
      std::vector<Bytes> send(static_cast<std::size_t>(p));
      for (int d = 0; d < p; ++d) send[static_cast<std::size_t>(d)] = Bytes{static_cast<std::uint8_t>(r * 16 + d)};
      auto out = comm.all_to_all(send, {});
      for (int s = 0; s < p; ++s) {
        CHECK(out[static_cast<std::size_t>(s)] == Bytes{static_cast<std::uint8_t>(s * 16 + r)});
      }
    });
  }
  for (auto& w : workers) w.join();
  for (int r = 0; r < p; ++r) CHECK(gathered[static_cast<std::size_t>(r)] == inputs);
}

}  // TEST_SUITE

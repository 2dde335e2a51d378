#include "freescale/experiments.hpp"

#include "freescale/partition.hpp"

namespace freescale::experiments {

StragglerTrend straggler_trend(const workload::WorkloadSpec& spec, const sim::CostModel& cost) {
  workload::Generator gen(spec);
  const int world = spec.num_ranks;

  EventLog base_log(world), fbs_log(world);
  std::vector<double> base_bounds{0.0}, fbs_bounds{0.0};
  double sparsity_sum = 0;
  std::size_t sparsity_count = 0;
  int iterations = 0;

  while (gen.has_next()) {
    const auto batches = gen.next_iteration();
    std::vector<partition::GlobalSampleMeta> metas;
    std::vector<std::vector<std::uint64_t>> raw_lengths(static_cast<std::size_t>(world));
    for (int r = 0; r < world; ++r) {
      const auto& batch = batches[static_cast<std::size_t>(r)];
      for (std::size_t k = 0; k < batch.samples.size(); ++k) {
        partition::GlobalSampleMeta m;
        m.origin_rank = r;
        m.local_index = static_cast<int>(k);
        m.uih_len = batch.samples[k].uih.size();
        metas.push_back(std::move(m));
        raw_lengths[static_cast<std::size_t>(r)].push_back(batch.samples[k].uih.size());
      }
      if (batch.max_uih_len() > 0) {
        sparsity_sum += workload::measure_sparsity(raw_lengths[static_cast<std::size_t>(r)]);
        ++sparsity_count;
      }
    }

    const auto plan = partition::fbs_partition(metas, world);
    double base_max = 0, fbs_max = 0;
    for (int r = 0; r < world; ++r) {
      const double c = cost.compute_time_for_lengths(raw_lengths[static_cast<std::size_t>(r)]);
      base_log.append(Event{iterations, r, Channel::Main, EventKind::Compute, Category::None,
                            base_bounds.back(), base_bounds.back() + c, 0});
      base_max = std::max(base_max, c);

      std::vector<std::uint64_t> balanced;
      for (std::size_t g : plan.receive_order[static_cast<std::size_t>(r)]) {
        balanced.push_back(metas[g].uih_len);
      }
      const double cb = cost.compute_time_for_lengths(balanced);
      fbs_log.append(Event{iterations, r, Channel::Main, EventKind::Compute, Category::None,
                           fbs_bounds.back(), fbs_bounds.back() + cb, 0});
      fbs_max = std::max(fbs_max, cb);
    }
    base_bounds.push_back(base_bounds.back() + base_max);
    fbs_bounds.push_back(fbs_bounds.back() + fbs_max);
    ++iterations;
  }

  StragglerTrend out;
  out.iterations = iterations;
  if (iterations > 0) {
    out.baseline_straggler = sim::Timeline(std::move(base_log), base_bounds).mean_straggler_pct();
    out.fbs_straggler = sim::Timeline(std::move(fbs_log), fbs_bounds).mean_straggler_pct();
  }
  if (sparsity_count > 0) out.mean_sparsity = sparsity_sum / static_cast<double>(sparsity_count);
  return out;
}

namespace {

template <typename Fn>
std::vector<BenchPoint> bench_collective(int ranks, std::span<const std::size_t> sizes,
                                         const comm::LinkParams& link, Fn&& call) {
  std::vector<BenchPoint> out;
  for (std::size_t size : sizes) {
    BenchPoint point;
    point.payload_bytes = size;
    for (auto mode : {comm::CollectiveMode::Fused, comm::CollectiveMode::SmFree}) {
      comm::InProcessFabric fabric(ranks, link);
      std::vector<double> durations(static_cast<std::size_t>(ranks), 0.0);
      fabric.run([&](int rank) {
        RankClock clock;
        comm::Communicator comm(fabric.transport(rank), &clock);
        call(comm, rank, size, mode);
        durations[static_cast<std::size_t>(rank)] = clock.main_time();
      });
      double mean = 0;
      for (double d : durations) mean += d;
      mean /= static_cast<double>(ranks);
      if (mode == comm::CollectiveMode::Fused) {
        point.fused_us = mean;
      } else {
        point.sm_free_us = mean;
      }
    }
    out.push_back(point);
  }
  return out;
}

comm::Bytes payload_of(int rank, std::size_t size) {
  comm::Bytes b(size);
  for (std::size_t i = 0; i < size; ++i) b[i] = static_cast<std::uint8_t>(rank * 131 + i);
  return b;
}

}  // namespace

std::vector<BenchPoint> bench_ring_all_gather(int ranks, std::span<const std::size_t> sizes,
                                              const comm::LinkParams& link) {
  return bench_collective(ranks, sizes, link,
                          [](comm::Communicator& comm, int rank, std::size_t size, auto mode) {
                            std::vector<std::uint64_t> chunk_sizes(
                                static_cast<std::size_t>(comm.world_size()), size);
                            comm.ring_all_gather(payload_of(rank, size), chunk_sizes,
                                                 {Channel::Main, Category::None, mode, false});
                          });
}

std::vector<BenchPoint> bench_all_gather(int ranks, std::span<const std::size_t> sizes,
                                         const comm::LinkParams& link) {
  return bench_collective(ranks, sizes, link,
                          [](comm::Communicator& comm, int rank, std::size_t size, auto mode) {
                            comm.all_gather(payload_of(rank, size),
                                            {Channel::Main, Category::None, mode, false});
                          });
}

std::vector<BenchPoint> bench_all_to_all(int ranks, std::span<const std::size_t> sizes,
                                         const comm::LinkParams& link) {
  return bench_collective(ranks, sizes, link,
                          [](comm::Communicator& comm, int rank, std::size_t size, auto mode) {
                            std::vector<comm::Bytes> send(
                                static_cast<std::size_t>(comm.world_size()),
                                payload_of(rank, size));
                            comm.all_to_all(send, {Channel::Main, Category::None, mode, false});
                          });
}

}  // namespace freescale::experiments

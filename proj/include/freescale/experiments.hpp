#pragma once

#include "freescale/sim.hpp"
#include "freescale/workload.hpp"

namespace freescale::experiments {

/// Compute-imbalance study on generated workloads: per-iteration rank compute
/// times with and without FBS redistribution, rolled into straggler and
/// sparsity aggregates. Timing only; runs at scales (64 ranks, 21k UIH) where
/// materializing embedding traffic would be pointless.
struct StragglerTrend {
  double baseline_straggler = 0;  // mean over iterations
  double fbs_straggler = 0;
  double mean_sparsity = 0;       // raw batches, mean over ranks and iterations
  int iterations = 0;
};

StragglerTrend straggler_trend(const workload::WorkloadSpec& spec, const sim::CostModel& cost);

/// Logical latency of one collective call at a given payload size per rank.
struct BenchPoint {
  std::size_t payload_bytes = 0;
  double fused_us = 0;
  double sm_free_us = 0;
};

std::vector<BenchPoint> bench_ring_all_gather(int ranks, std::span<const std::size_t> sizes,
                                              const comm::LinkParams& link);
std::vector<BenchPoint> bench_all_gather(int ranks, std::span<const std::size_t> sizes,
                                         const comm::LinkParams& link);
std::vector<BenchPoint> bench_all_to_all(int ranks, std::span<const std::size_t> sizes,
                                         const comm::LinkParams& link);

}  // namespace freescale::experiments

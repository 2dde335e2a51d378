#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "freescale/errors.hpp"

namespace freescale::partition {

/// Per-sample metadata gathered from all ranks (Stage I/II of the balancer).
struct GlobalSampleMeta {
  int origin_rank = 0;
  int local_index = 0;
  std::uint64_t uih_len = 0;
  std::uint32_t num_candidates = 0;
  std::vector<std::uint32_t> candidate_lens;
};

/// A redistribution decision over the global sample set. `assignment` maps the
/// global meta index to its destination rank; `receive_order` lists, per rank,
/// the global indices it ends up with, in deterministic consumption order.
struct PartitionPlan {
  int num_ranks = 0;
  std::vector<int> assignment;
  std::vector<std::vector<std::size_t>> receive_order;

  /// Per-(src,dst) exchange lists derived from assignment + origin metadata:
  /// element [src][dst] holds src-local sample indices headed to dst, in the
  /// destination's consumption order.
  std::vector<std::vector<std::vector<int>>> exchange_lists(
      std::span<const GlobalSampleMeta> metas) const;

  /// Throws std::invalid_argument naming the violated invariant.
  void validate(std::size_t num_samples, bool fixed_batch) const;
};

struct AutoTuneState {
  std::vector<int> local_batch_size;   // per rank; sums to the global total
  std::vector<double> ema_local;       // per rank execution-time EMA
  double ema_global = 0.0;
  int step = 1;                        // adjustment granularity in samples
  double delta = 0.05;                 // relative dead zone around the mean
  double decay = 0.9;                  // EMA decay
  bool initialized = false;
};

/// Fixed batch size: sort by uih_len descending (ties by origin rank then
/// local index) and deal samples to ranks in snake order. Every rank receives
/// exactly len(metas)/n samples.
PartitionPlan fbs_partition(std::span<const GlobalSampleMeta> metas, int num_ranks);

/// Variable batch size: weight samples by uih_len^alpha, sort descending and
/// cut into n contiguous segments minimizing the maximum segment weight
/// (exact DP). With an initialized autotune state, segment boundaries follow
/// the tuned per-rank sizes instead; a fresh state is seeded from the DP cut.
PartitionPlan vbs_partition(std::span<const GlobalSampleMeta> metas, int num_ranks, double alpha,
                            AutoTuneState* tune = nullptr);

/// Feedback step: move one `step` of samples toward ranks that run faster
/// than the EMA of the global mean, conserving the global total and keeping
/// every rank at >= 1 sample.
void autotune_update(AutoTuneState& tune, std::span<const double> local_times);

/// Identity plan: every sample stays on its origin rank, in origin order.
PartitionPlan identity_partition(std::span<const GlobalSampleMeta> metas, int num_ranks);

using PartitionFn = std::function<PartitionPlan(std::span<const GlobalSampleMeta>, int)>;

/// Run a user partitioner and validate the plan before use.
PartitionPlan custom_partition(const PartitionFn& fn, std::span<const GlobalSampleMeta> metas,
                               int num_ranks);

/// Exhaustive minimizer of the maximum contiguous-segment weight; exponential,
/// test oracle only.
double min_max_contiguous_bruteforce(std::span<const double> weights, int segments);

/// Maximum segment weight achieved by a plan's contiguous interpretation.
double plan_max_weight(const PartitionPlan& plan, std::span<const GlobalSampleMeta> metas,
                       double alpha);

}  // namespace freescale::partition

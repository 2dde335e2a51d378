#pragma once

#include <deque>
#include <optional>

#include "freescale/partition.hpp"
#include "freescale/pipeline.hpp"
#include "freescale/workload.hpp"

namespace freescale::balancer {

enum class Stage : std::uint8_t { Idle, LengthsGathered, CandidatesGathered, Shuffled };

struct BalancerConfig {
  std::string partition = "fbs";  // fbs | vbs | none | custom:<name>
  double alpha = 1.0;
  int autotune_step = 1;
  double autotune_delta = 0.05;
  double autotune_decay = 0.9;
  /// How many iterations ahead a batch is fully shuffled before consumption.
  int lead = 1;
  comm::CollectiveMode mode = comm::CollectiveMode::Fused;
};

/// Three-stage sample redistribution, driven entirely by pipeline hooks:
/// stage 1 (gather UIH lengths and candidate counts) at the optimizer-step
/// hook, stage 2 (gather composite candidate lengths, then run the
/// partitioner) as forward begins, stage 3 (sample AllToAll) as backward
/// begins, each working `lead` batches ahead. The consuming side awaits the
/// stage-3 handle at data load. Batches that would need hooks before
/// iteration 0 are balanced synchronously at startup.
class Balancer {
 public:
  Balancer(comm::Communicator& comm, BalancerConfig config,
           std::function<const workload::Batch*(int)> raw_batches, int num_iterations);

  void install_hooks(pipeline::HookRegistry& hooks);

  /// Balanced batch for this iteration; blocks the main lane on the stage-3
  /// handle.
  workload::Batch take(int iteration);
  /// Balanced batch ids without a main-lane wait (side-lane consumers).
  const workload::Batch* peek(int iteration);

  /// Deterministic model-execution-time feedback for the autotune loop.
  void report_compute_time(double us) { last_compute_us_ = us; }

  std::uint64_t stage_fires(int stage) const { return stage_fires_[stage]; }

 private:
  struct Pending {
    int index = 0;
    Stage stage = Stage::Idle;
    const workload::Batch* raw = nullptr;
    std::vector<partition::GlobalSampleMeta> metas;  // world, rank-major
    std::vector<std::uint64_t> world_num_candidates;
    std::vector<double> world_times;
    partition::PartitionPlan plan;
    comm::Handle<std::vector<comm::Bytes>> shuffled;  // per-src sample blobs
    std::optional<workload::Batch> balanced;
  };

  void stage1_gather_lengths(Pending& p);
  void stage2_gather_candidate_lengths_and_plan(Pending& p);
  void stage3_shuffle(Pending& p);
  Pending* pending_for(int index, bool create);
  void run_stage_for(int index, int stage);
  workload::Batch assemble(Pending& p);

  comm::Communicator& comm_;
  BalancerConfig config_;
  std::function<const workload::Batch*(int)> raw_batches_;
  int num_iterations_;
  std::deque<Pending> pending_;
  partition::AutoTuneState tune_;
  double last_compute_us_ = 0;
  std::uint64_t stage_fires_[3] = {0, 0, 0};
};

}  // namespace freescale::balancer

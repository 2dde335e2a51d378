#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "freescale/comm.hpp"
#include "freescale/partition.hpp"
#include "freescale/sim.hpp"
#include "freescale/workload.hpp"

namespace freescale::pipeline {

enum class Mode { Synchronized, Prioritized };

inline const char* mode_name(Mode m) {
  return m == Mode::Synchronized ? "synchronized" : "prioritized";
}

/// The five pipeline stages plus the metrics tail; hooks fire once per
/// iteration per point, in registration order.
enum class HookPoint : std::uint8_t {
  DataLoad,
  PreForward,
  PostForward,
  PostBackward,
  OptimizerStep,
  Metrics
};

struct HookContext {
  int iteration = 0;
  int rank = 0;
};

class HookRegistry {
 public:
  using Fn = std::function<void(const HookContext&)>;

  void add(HookPoint point, Fn fn) {
    hooks_[static_cast<std::size_t>(point)].push_back(std::move(fn));
  }

  void fire(HookPoint point, const HookContext& ctx) {
    for (auto& fn : hooks_[static_cast<std::size_t>(point)]) fn(ctx);
    ++fire_counts_[static_cast<std::size_t>(point)];
  }

  std::uint64_t fire_count(HookPoint point) const {
    return fire_counts_[static_cast<std::size_t>(point)];
  }

 private:
  std::vector<Fn> hooks_[6];
  std::uint64_t fire_counts_[6] = {0, 0, 0, 0, 0, 0};
};

/// Mean-pools each sample's UIH embedding rows, projects with a dense vector
/// and takes squared error against the label. Gradients are closed form:
/// d(loss)/d(row occurrence) = 2*(yhat-y)*w / (|uih| * N_global).
struct ToyModel {
  std::uint32_t dim = 0;
  std::vector<double> w;

  static ToyModel init(std::uint32_t dim, std::uint64_t seed);

  struct Result {
    double loss_sum = 0;                 // sum of squared errors, local
    std::vector<double> dense_grad_sum;  // sum over local samples, undivided
    std::vector<double> emb_grads;       // per occurrence row, already / N_global
  };
  /// embeddings holds one dim-row per uih occurrence, batch order.
  Result forward_backward(const workload::Batch& batch, std::span<const double> embeddings,
                          std::uint64_t global_samples) const;

  double predict(const workload::Sample& s, std::span<const double> pooled) const;
};

/// Average of per-rank gradient sums that equals the global-batch gradient:
/// AllReduce the undivided sums, then divide by the global sample count.
std::vector<double> dense_grad_sync(comm::Communicator& comm, std::span<const double> grad_sum,
                                    std::uint64_t global_samples);

struct RunConfig {
  Mode mode = Mode::Synchronized;
  bool balancer_enabled = false;
  std::string partition = "fbs";  // fbs | vbs | none | custom:<name>
  double alpha = 1.0;
  int autotune_step = 1;
  double autotune_delta = 0.05;
  double autotune_decay = 0.9;
  int prefetch_depth = 1;
  sim::CostModel cost;
  std::uint64_t table_rows = 1024;
  std::uint32_t dim = 8;
  double lr_embedding = 0.05;
  double lr_dense = 0.05;
  std::uint64_t model_seed = 1;
};

struct RunResult {
  std::vector<sim::MetricRecord> records;
  std::vector<double> losses;
  std::vector<double> final_dense;
  std::vector<std::uint8_t> table_checkpoint;  // embedding format
  std::vector<std::uint8_t> full_checkpoint;   // table checkpoint + dense weights
  std::optional<sim::Timeline> timeline;
  double total_us = 0;
  std::uint64_t samples_processed = 0;
};

/// Drive the five-stage loop over an in-memory workload with one worker
/// thread per rank. Deterministic given (workload, config).
RunResult run(const std::vector<std::vector<workload::Batch>>& iterations,
              const workload::WorkloadSpec& wspec, const RunConfig& config);

/// User partitioners selectable as partition = "custom:<name>".
void register_partitioner(const std::string& name, partition::PartitionFn fn);
const partition::PartitionFn* find_partitioner(const std::string& name);

}  // namespace freescale::pipeline

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "freescale/comm.hpp"
#include "freescale/jagged.hpp"

namespace freescale::embedding {

/// Row-wise sharding: global row g lives on shard g mod num_shards at local
/// index g div num_shards.
struct TableGeometry {
  std::uint64_t total_rows = 0;
  std::uint32_t dim = 1;
  int num_shards = 1;

  int owner(std::uint64_t g) const { return static_cast<int>(g % static_cast<std::uint64_t>(num_shards)); }
  std::uint64_t local_index(std::uint64_t g) const { return g / static_cast<std::uint64_t>(num_shards); }
  std::uint64_t local_rows(int shard) const {
    const auto s = static_cast<std::uint64_t>(shard);
    return total_rows > s ? (total_rows - 1 - s) / static_cast<std::uint64_t>(num_shards) + 1 : 0;
  }
};

/// Deterministic initial value of element (row, dim); independent of the
/// shard count so single-process oracles can rebuild the same table.
double initial_value(std::uint64_t seed, std::uint64_t row, std::uint32_t d);

enum class IndexLayout : std::uint8_t { BatchMajor, ShardMajor };

/// ID container in one of the two distribution forms. Batch-major segments
/// are samples; shard-major segments are source ranks.
struct IndexSet {
  IndexLayout layout = IndexLayout::BatchMajor;
  IdJagged ids;
  std::vector<std::uint64_t> unique_ids;  // sorted

  static IndexSet batch_major(IdJagged ids);
  static IndexSet shard_major(IdJagged ids);
};

struct CollisionSplit {
  std::vector<std::uint64_t> collision;       // unique(cur) ∩ unique(next)
  std::vector<std::uint64_t> exclusive_cur;   // unique(cur) \ collision
  std::vector<std::uint64_t> exclusive_next;  // unique(next) \ collision
};

/// Collision detection is only meaningful shard-major; both sets must already
/// live on the same shard.
CollisionSplit compute_collision(const IndexSet& cur, const IndexSet& next);

/// |collision| / |unique(next)|. Throws when next uses no rows.
double collision_pct(const IndexSet& cur, const IndexSet& next);

/// One rank's shard of the embedding table, mutated only by its owner.
class ShardView {
 public:
  ShardView(TableGeometry geom, int shard_id, double learning_rate, std::uint64_t seed);

  const TableGeometry& geometry() const { return geom_; }
  int shard_id() const { return shard_; }
  double learning_rate() const { return lr_; }
  std::uint64_t local_rows() const { return geom_.local_rows(shard_); }
  const std::vector<double>& values() const { return values_; }

  std::span<const double> row(std::uint64_t global_id) const;

  /// Rows gathered in id order; duplicate ids yield duplicate rows.
  std::vector<double> lookup(std::span<const std::uint64_t> ids) const;

  /// Plain SGD with deterministic duplicate handling: gradients of one row
  /// are summed in the order the occurrences appear (source rank, position),
  /// applied once. Returns the post-update rows of the sorted unique ids.
  struct UpdateResult {
    std::vector<std::uint64_t> unique_ids;
    std::vector<double> rows;  // |unique_ids| x dim
  };
  UpdateResult apply_gradients(std::span<const std::uint64_t> ids, std::span<const double> grads);

 private:
  std::uint64_t local_of(std::uint64_t global_id) const;

  TableGeometry geom_;
  int shard_;
  double lr_;
  std::vector<double> values_;
};

/// Bookkeeping for one batch-major ID set routed to shard-major form: which
/// occurrence went to which shard, and on the owner side, who asked for what.
struct ShardRouting {
  IdJagged batch_ids;                                   // segments per sample
  std::vector<int> occ_shard;                           // per flat occurrence
  std::vector<std::vector<std::size_t>> send_positions;  // per shard: flat positions, original order
  std::vector<std::vector<std::uint64_t>> send_ids;      // per shard: ids, original order
  std::vector<std::vector<std::uint64_t>> unique_per_shard;  // per shard: sorted unique sent ids

  IndexSet shard_ids;                                   // received, segments per source rank
  std::vector<std::vector<std::uint64_t>> recv_unique_per_src;  // per src: sorted unique

  std::size_t occurrences() const { return occ_shard.size(); }
};

/// The ID AllToAll: every occurrence is delivered to its owner shard, segments
/// ordered by source rank. Collective; all ranks must call together.
ShardRouting route_to_shard_major(comm::Communicator& comm, const TableGeometry& geom,
                                  const IdJagged& batch_ids, const comm::CollectiveOptions& opts);

/// Per-shard (ids, rows) buffer in batch-major hands; ids sorted ascending
/// within each shard slot.
struct EmbBuffer {
  std::vector<std::vector<std::uint64_t>> ids;  // per shard
  std::vector<std::vector<double>> rows;        // per shard, |ids| x dim
};

struct IterationStats {
  std::uint64_t collision_rows = 0;
  std::uint64_t unique_next_rows = 0;
  std::uint64_t blocking_bytes = 0;  // collision-chain payload bytes
  double collision_fraction = 0.0;
};

/// The blocking reference path: ID AllToAll, lookup, value AllToAll back, and
/// on backward a gradient AllToAll plus a full deterministic update. All
/// collectives ride the main lane.
class SynchronizedEmbedding {
 public:
  SynchronizedEmbedding(ShardView& shard, comm::Communicator& comm);

  std::vector<double> forward(const IdJagged& ids);
  void backward(std::span<const double> grads);

 private:
  ShardView& shard_;
  comm::Communicator& comm_;
  std::optional<ShardRouting> route_;
};

/// Collision-aware protocol with a persistent cross-iteration context.
/// Iteration 0 runs a synchronized bootstrap; from iteration 1 on, forward
/// applies the deferred exclusive gradients of i-1, routes the prefetched
/// i+1 ids, splits collision/exclusive, prefetches exclusive embeddings for
/// i+1 and routes the split masks, then serves iteration i by merging the
/// two buffers prepared one iteration earlier. Backward splits gradients by
/// the masks, expedites collision rows and defers the rest.
class PrioritizedEmbedding {
 public:
  PrioritizedEmbedding(ShardView& shard, comm::Communicator& comm,
                       comm::CollectiveMode mode = comm::CollectiveMode::Fused);

  /// ids_next is null only on the final iteration.
  std::vector<double> forward(const IdJagged& ids_cur, const IdJagged* ids_next);
  void backward(std::span<const double> grads);
  /// Flush deferred exclusive gradients after the last backward.
  void finalize();

  const std::vector<IterationStats>& stats() const { return stats_; }

 private:
  std::vector<double> merge_current(const IdJagged& ids_cur);
  void apply_deferred_exclusive();
  comm::CollectiveOptions side(Category cat) const;

  ShardView& shard_;
  comm::Communicator& comm_;
  comm::CollectiveMode mode_;
  int iter_ = 0;
  bool forward_done_ = false;

  std::optional<ShardRouting> route_prev_;  // iteration i-1 (owner side for deferred apply)
  std::optional<ShardRouting> route_cur_;   // iteration i
  std::optional<ShardRouting> route_next_;  // iteration i+1

  std::vector<std::uint64_t> co_ids_;        // collide(I^i, I^{i+1}), this shard
  std::vector<std::uint64_t> ex_cur_ids_;    // unique(I^i) \ co
  std::vector<std::uint64_t> ex_prev_ids_;   // previous pair's exclusive_cur
  std::vector<std::vector<std::uint64_t>> mask_co_;  // per shard, for splitting iteration i grads
  std::vector<std::vector<std::uint64_t>> mask_ex_;

  comm::Handle<EmbBuffer> exclusive_handle_;  // E~_ex^i
  comm::Handle<EmbBuffer> collision_handle_;  // E~_co^i
  std::vector<std::vector<double>> pending_ex_grads_;  // per shard, occurrence rows
  bool has_pending_ = false;

  std::vector<IterationStats> stats_;
};

/// Full table in global row-major order, identical on every rank.
std::vector<double> gather_full_table(comm::Communicator& comm, const ShardView& shard);

/// Checkpoint blob: u64 total_rows, u64 dim, u64 num_shards, then row-major
/// f64 values. Used byte-for-byte by the parity harness.
std::vector<std::uint8_t> checkpoint_bytes(const TableGeometry& geom,
                                           std::span<const double> full_table);

}  // namespace freescale::embedding

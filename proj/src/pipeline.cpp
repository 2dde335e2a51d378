#include "freescale/pipeline.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <mutex>

#include "freescale/balancer.hpp"
#include "freescale/embedding.hpp"
#include "freescale/rng.hpp"

namespace freescale::pipeline {

namespace {

std::mutex g_partitioner_mu;
std::map<std::string, partition::PartitionFn>& partitioner_registry() {
  static std::map<std::string, partition::PartitionFn> reg;
  return reg;
}

}  // namespace

void register_partitioner(const std::string& name, partition::PartitionFn fn) {
  std::lock_guard<std::mutex> lock(g_partitioner_mu);
  partitioner_registry()[name] = std::move(fn);
}

const partition::PartitionFn* find_partitioner(const std::string& name) {
  std::lock_guard<std::mutex> lock(g_partitioner_mu);
  auto it = partitioner_registry().find(name);
  return it == partitioner_registry().end() ? nullptr : &it->second;
}

ToyModel ToyModel::init(std::uint32_t dim, std::uint64_t seed) {
  ToyModel m;
  m.dim = dim;
  m.w.resize(dim);
  std::uint64_t state = seed ^ 0xd15ea5e0f1e1dULL;
  for (auto& x : m.w) x = (rng_double(state) - 0.5) * 0.2;
  return m;
}

double ToyModel::predict(const workload::Sample&, std::span<const double> pooled) const {
  double y = 0;
  for (std::uint32_t d = 0; d < dim; ++d) y += pooled[d] * w[d];
  return y;
}

ToyModel::Result ToyModel::forward_backward(const workload::Batch& batch,
                                            std::span<const double> embeddings,
                                            std::uint64_t global_samples) const {
  Result res;
  res.dense_grad_sum.assign(dim, 0.0);
  res.emb_grads.assign(embeddings.size(), 0.0);
  const double n = static_cast<double>(global_samples);
  std::vector<double> pooled(dim);
  std::size_t occ = 0;
  for (const auto& s : batch.samples) {
    const std::size_t len = s.uih.size();
    std::fill(pooled.begin(), pooled.end(), 0.0);
    for (std::size_t k = 0; k < len; ++k) {
      for (std::uint32_t d = 0; d < dim; ++d) pooled[d] += embeddings[(occ + k) * dim + d];
    }
    if (len > 0) {
      for (std::uint32_t d = 0; d < dim; ++d) pooled[d] /= static_cast<double>(len);
    }
    const double err = predict(s, pooled) - s.label;
    res.loss_sum += err * err;
    for (std::uint32_t d = 0; d < dim; ++d) res.dense_grad_sum[d] += 2.0 * err * pooled[d];
    if (len > 0) {
      // d(loss)/d(row) is uniform across a sample's occurrences.
      const double scale = 2.0 * err / (static_cast<double>(len) * n);
      for (std::size_t k = 0; k < len; ++k) {
        for (std::uint32_t d = 0; d < dim; ++d) res.emb_grads[(occ + k) * dim + d] = scale * w[d];
      }
    }
    occ += len;
  }
  if (occ * dim != embeddings.size()) {
    throw std::invalid_argument("toy model: embedding rows do not match batch occurrences");
  }
  return res;
}

std::vector<double> dense_grad_sync(comm::Communicator& comm, std::span<const double> grad_sum,
                                    std::uint64_t global_samples) {
  auto summed = comm.all_reduce_sum(
      grad_sum, {Channel::Main, Category::Dense, comm::CollectiveMode::Fused, true});
  for (auto& g : summed) g /= static_cast<double>(global_samples);
  return summed;
}

namespace {

struct SharedResults {
  std::vector<double> boundaries;
  std::vector<std::vector<double>> sparsity;  // [rank][iter]
  std::vector<double> losses;                 // [iter], rank 0 writes
  std::vector<double> final_dense;
  std::vector<std::uint8_t> table_checkpoint;
  std::vector<std::uint8_t> full_checkpoint;
};

std::vector<double> collision_series(const std::vector<std::vector<workload::Batch>>& iters) {
  std::vector<double> out(iters.size(), 0.0);
  std::vector<std::uint64_t> prev;
  for (std::size_t i = 0; i < iters.size(); ++i) {
    auto cur = workload::unique_rows(iters[i]);
    if (i > 0 && !cur.empty()) out[i] = workload::collision_fraction(prev, cur);
    prev = std::move(cur);
  }
  return out;
}

}  // namespace

RunResult run(const std::vector<std::vector<workload::Batch>>& iterations,
              const workload::WorkloadSpec& wspec, const RunConfig& config) {
  const int world = wspec.num_ranks;
  const int num_iters = static_cast<int>(iterations.size());
  for (const auto& it : iterations) {
    if (it.size() != static_cast<std::size_t>(world)) {
      throw std::invalid_argument("pipeline: iteration without one batch per rank");
    }
  }
  const std::uint64_t global_samples =
      static_cast<std::uint64_t>(world) * static_cast<std::uint64_t>(wspec.batch_size);

  RunResult result;
  result.samples_processed = static_cast<std::uint64_t>(num_iters) * global_samples;
  if (num_iters == 0) {
    // Nothing ran: initial model and table state unchanged.
    embedding::TableGeometry geom{config.table_rows, config.dim, world};
    std::vector<double> full(config.table_rows * config.dim);
    for (std::uint64_t g = 0; g < config.table_rows; ++g) {
      for (std::uint32_t d = 0; d < config.dim; ++d) {
        full[g * config.dim + d] = embedding::initial_value(config.model_seed, g, d);
      }
    }
    result.table_checkpoint = embedding::checkpoint_bytes(geom, full);
    result.final_dense = ToyModel::init(config.dim, config.model_seed).w;
    result.full_checkpoint = result.table_checkpoint;
    const auto* wp = reinterpret_cast<const std::uint8_t*>(result.final_dense.data());
    result.full_checkpoint.insert(result.full_checkpoint.end(), wp,
                                  wp + result.final_dense.size() * sizeof(double));
    return result;
  }

  const auto collision = collision_series(iterations);

  comm::InProcessFabric fabric(world, config.cost.link);
  EventLog log(world);
  std::vector<RankClock> clocks(static_cast<std::size_t>(world));
  SharedResults shared;
  shared.boundaries.assign(static_cast<std::size_t>(num_iters) + 1, 0.0);
  shared.sparsity.assign(static_cast<std::size_t>(world),
                         std::vector<double>(static_cast<std::size_t>(num_iters), 0.0));
  shared.losses.assign(static_cast<std::size_t>(num_iters), 0.0);

  fabric.run([&](int rank) {
    RankClock& clock = clocks[static_cast<std::size_t>(rank)];
    comm::Communicator comm(fabric.transport(rank), &clock, &log);
    embedding::TableGeometry geom{config.table_rows, config.dim, world};
    embedding::ShardView shard(geom, rank, config.lr_embedding, config.model_seed);
    ToyModel model = ToyModel::init(config.dim, config.model_seed);

    std::optional<embedding::SynchronizedEmbedding> sync_engine;
    std::optional<embedding::PrioritizedEmbedding> prio_engine;
    if (config.mode == Mode::Synchronized) {
      sync_engine.emplace(shard, comm);
    } else {
      prio_engine.emplace(shard, comm, config.cost.collective_mode);
    }

    HookRegistry hooks;
    std::optional<balancer::Balancer> bal;
    if (config.balancer_enabled) {
      balancer::BalancerConfig bc;
      bc.partition = config.partition;
      bc.alpha = config.alpha;
      bc.autotune_step = config.autotune_step;
      bc.autotune_delta = config.autotune_delta;
      bc.autotune_decay = config.autotune_decay;
      bc.mode = config.cost.collective_mode;
      // The prioritized protocol routes the next batch's ids during this
      // iteration's forward, so the balancer must run one batch further
      // ahead than the consumption prefetch.
      bc.lead = config.prefetch_depth + (config.mode == Mode::Prioritized ? 1 : 0);
      bal.emplace(comm, bc, [&](int i) -> const workload::Batch* {
        return i >= 0 && i < num_iters ? &iterations[static_cast<std::size_t>(i)][static_cast<std::size_t>(rank)]
                                       : nullptr;
      },
                  num_iters);
      bal->install_hooks(hooks);
    }

    const double penalty = config.cost.overlap_penalty;
    for (int i = 0; i < num_iters; ++i) {
      comm.set_iteration(i);
      const HookContext ctx{i, rank};

      hooks.fire(HookPoint::DataLoad, ctx);
      workload::Batch batch =
          bal ? bal->take(i) : iterations[static_cast<std::size_t>(i)][static_cast<std::size_t>(rank)];

      std::vector<std::uint64_t> lengths;
      lengths.reserve(batch.samples.size());
      for (const auto& s : batch.samples) lengths.push_back(s.uih.size());
      double local_sparsity = 0.0;
      if (!lengths.empty() && batch.max_uih_len() > 0) {
        local_sparsity = workload::measure_sparsity(lengths);
      }
      shared.sparsity[static_cast<std::size_t>(rank)][static_cast<std::size_t>(i)] = local_sparsity;

      hooks.fire(HookPoint::PreForward, ctx);

      const IdJagged ids_cur = batch.uih_ids();
      std::vector<double> emb_rows;
      if (config.mode == Mode::Synchronized) {
        emb_rows = sync_engine->forward(ids_cur);
      } else {
        std::optional<IdJagged> ids_next;
        if (i + 1 < num_iters) {
          if (bal) {
            ids_next = bal->peek(i + 1)->uih_ids();
          } else {
            ids_next = iterations[static_cast<std::size_t>(i) + 1][static_cast<std::size_t>(rank)].uih_ids();
          }
        }
        emb_rows = prio_engine->forward(ids_cur, ids_next ? &*ids_next : nullptr);
      }

      const double compute_us = config.cost.compute_time_for_lengths(lengths);
      comm.log_compute(compute_us / 3.0, penalty);  // forward share
      ToyModel::Result grads = model.forward_backward(batch, emb_rows, global_samples);
      hooks.fire(HookPoint::PostForward, ctx);
      comm.log_compute(compute_us * 2.0 / 3.0, penalty);  // backward share

      if (config.mode == Mode::Synchronized) {
        sync_engine->backward(grads.emb_grads);
      } else {
        prio_engine->backward(grads.emb_grads);
      }
      hooks.fire(HookPoint::PostBackward, ctx);

      // Optimizer step: one synchronizing reduction carries the dense grad
      // sums plus the loss and sample count.
      std::vector<double> payload = grads.dense_grad_sum;
      payload.push_back(grads.loss_sum);
      payload.push_back(static_cast<double>(batch.samples.size()));
      auto reduced = comm.all_reduce_sum(
          payload, {Channel::Main, Category::Dense, comm::CollectiveMode::Fused, true});
      const double count = reduced[config.dim + 1];
      if (count != static_cast<double>(global_samples)) {
        throw ProtocolError("pipeline: sample conservation violated (" + std::to_string(count) +
                            " vs " + std::to_string(global_samples) + ")");
      }
      for (std::uint32_t d = 0; d < config.dim; ++d) {
        model.w[d] -= config.lr_dense * reduced[d] / static_cast<double>(global_samples);
      }
      if (rank == 0) {
        shared.losses[static_cast<std::size_t>(i)] = reduced[config.dim] / static_cast<double>(global_samples);
        shared.boundaries[static_cast<std::size_t>(i) + 1] = clock.main_time();
      }
      if (bal) bal->report_compute_time(compute_us);
      hooks.fire(HookPoint::OptimizerStep, ctx);
      hooks.fire(HookPoint::Metrics, ctx);
    }

    if (prio_engine) prio_engine->finalize();

    // Final state: full table everywhere, replica-consistency check on the
    // dense weights, checkpoint blobs assembled on rank 0.
    auto full = embedding::gather_full_table(comm, shard);
    auto ws = comm.all_gather(comm::pack_f64s(model.w),
                              {Channel::Main, Category::None, comm::CollectiveMode::Fused, true});
    for (int r = 0; r < world; ++r) {
      if (ws[static_cast<std::size_t>(r)] != ws[0]) {
        throw ProtocolError("pipeline: dense weights diverged across ranks");
      }
    }
    if (rank == 0) {
      shared.final_dense = model.w;
      shared.table_checkpoint = embedding::checkpoint_bytes(geom, full);
      shared.full_checkpoint = shared.table_checkpoint;
      const auto* wp = reinterpret_cast<const std::uint8_t*>(model.w.data());
      shared.full_checkpoint.insert(shared.full_checkpoint.end(), wp,
                                    wp + model.w.size() * sizeof(double));
    }
  });

  sim::Timeline timeline(std::move(log), shared.boundaries);
  result.records.reserve(static_cast<std::size_t>(num_iters));
  for (int i = 0; i < num_iters; ++i) {
    sim::MetricRecord rec;
    rec.iteration = i;
    rec.rank_count = world;
    rec.batch_size = wspec.batch_size;
    rec.max_uih = wspec.max_uih;
    rec.mode = mode_name(config.mode);
    double sp = 0;
    for (int r = 0; r < world; ++r) sp += shared.sparsity[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)];
    rec.sparsity = sp / world;
    rec.straggler_pct = timeline.straggler_pct(i);
    rec.collision_pct = collision[static_cast<std::size_t>(i)];
    const auto exposed = timeline.exposed_comm(i);
    rec.exposed_ids_us = exposed.ids_us;
    rec.exposed_emb_us = exposed.embedding_us;
    rec.exposed_grad_us = exposed.gradient_us;
    rec.exposed_balancer_us = exposed.balancer_us;
    rec.iteration_us = timeline.iteration_duration(i);
    rec.qps = rec.iteration_us > 0 ? sim::qps(global_samples, rec.iteration_us) : 0.0;
    result.records.push_back(std::move(rec));
  }
  result.losses = shared.losses;
  result.final_dense = shared.final_dense;
  result.table_checkpoint = shared.table_checkpoint;
  result.full_checkpoint = shared.full_checkpoint;
  result.total_us = timeline.total_duration();
  result.timeline.emplace(std::move(timeline));
  return result;
}

}  // namespace freescale::pipeline

#include "freescale/balancer.hpp"

#include <cstring>

namespace freescale::balancer {

using comm::Bytes;

namespace {

// stage-1 payload: [u64 B][u64 uih_len x B][u64 num_cand x B][f64 prev_compute_us]
Bytes encode_stage1(const workload::Batch& batch, double prev_time) {
  std::vector<std::uint64_t> v;
  v.reserve(2 * batch.samples.size() + 1);
  v.push_back(batch.samples.size());
  for (const auto& s : batch.samples) v.push_back(s.uih.size());
  for (const auto& s : batch.samples) v.push_back(s.candidates.size());
  Bytes out = comm::pack_u64s(v);
  const std::size_t at = out.size();
  out.resize(at + sizeof(double));
  std::memcpy(out.data() + at, &prev_time, sizeof(double));
  return out;
}

}  // namespace

Balancer::Balancer(comm::Communicator& comm, BalancerConfig config,
                   std::function<const workload::Batch*(int)> raw_batches, int num_iterations)
    : comm_(comm),
      config_(std::move(config)),
      raw_batches_(std::move(raw_batches)),
      num_iterations_(num_iterations) {
  if (config_.lead < 1) throw ConfigError("balancer: lead must be >= 1");
  tune_.step = config_.autotune_step;
  tune_.delta = config_.autotune_delta;
  tune_.decay = config_.autotune_decay;
}

Balancer::Pending* Balancer::pending_for(int index, bool create) {
  for (auto& p : pending_) {
    if (p.index == index) return &p;
  }
  if (!create) return nullptr;
  if (index >= num_iterations_) return nullptr;
  Pending p;
  p.index = index;
  p.raw = raw_batches_(index);
  if (p.raw == nullptr) throw ProtocolError("balancer: no raw batch for iteration " + std::to_string(index));
  pending_.push_back(std::move(p));
  return &pending_.back();
}

void Balancer::run_stage_for(int index, int stage) {
  if (index < 0 || index >= num_iterations_) return;
  Pending* p = pending_for(index, stage == 0);
  if (p == nullptr) return;
  switch (stage) {
    case 0:
      ++stage_fires_[0];
      stage1_gather_lengths(*p);
      break;
    case 1:
      ++stage_fires_[1];
      stage2_gather_candidate_lengths_and_plan(*p);
      break;
    case 2:
      ++stage_fires_[2];
      stage3_shuffle(*p);
      break;
  }
}

void Balancer::install_hooks(pipeline::HookRegistry& hooks) {
  const int lead = config_.lead;
  hooks.add(pipeline::HookPoint::DataLoad, [this, lead](const pipeline::HookContext& ctx) {
    if (ctx.iteration == 0) {
      // Startup: batches 0..lead-1 cannot ride earlier iterations' hooks, so
      // their three stages run back to back here; batch `lead` gets its
      // stage-1 head start.
      for (int j = 0; j < lead && j < num_iterations_; ++j) {
        run_stage_for(j, 0);
        run_stage_for(j, 1);
        run_stage_for(j, 2);
      }
      run_stage_for(lead, 0);
    }
  });
  hooks.add(pipeline::HookPoint::PreForward, [this, lead](const pipeline::HookContext& ctx) {
    run_stage_for(ctx.iteration + lead, 1);
  });
  hooks.add(pipeline::HookPoint::PostForward, [this, lead](const pipeline::HookContext& ctx) {
    run_stage_for(ctx.iteration + lead, 2);
  });
  hooks.add(pipeline::HookPoint::OptimizerStep, [this, lead](const pipeline::HookContext& ctx) {
    run_stage_for(ctx.iteration + lead + 1, 0);
  });
}

void Balancer::stage1_gather_lengths(Pending& p) {
  if (p.stage != Stage::Idle) throw ProtocolError("balancer: stage 1 fired out of order");
  auto gathered = comm_.all_gather(encode_stage1(*p.raw, last_compute_us_),
                                   {Channel::Side, Category::Balancer,
                                    config_.mode, false});
  const int world = comm_.world_size();
  p.metas.clear();
  p.world_num_candidates.clear();
  p.world_times.assign(static_cast<std::size_t>(world), 0.0);
  for (int r = 0; r < world; ++r) {
    const Bytes& b = gathered[static_cast<std::size_t>(r)];
    if (b.size() < 8 + 8) throw ProtocolError("balancer: short stage-1 payload");
    std::vector<std::uint64_t> v =
        comm::unpack_u64s(Bytes(b.begin(), b.end() - static_cast<std::ptrdiff_t>(sizeof(double))));
    std::memcpy(&p.world_times[static_cast<std::size_t>(r)], b.data() + b.size() - sizeof(double),
                sizeof(double));
    const auto B = static_cast<std::size_t>(v.at(0));
    if (v.size() != 1 + 2 * B) throw ProtocolError("balancer: stage-1 payload shape mismatch");
    for (std::size_t i = 0; i < B; ++i) {
      partition::GlobalSampleMeta meta;
      meta.origin_rank = r;
      meta.local_index = static_cast<int>(i);
      meta.uih_len = v[1 + i];
      meta.num_candidates = static_cast<std::uint32_t>(v[1 + B + i]);
      p.metas.push_back(std::move(meta));
      p.world_num_candidates.push_back(v[1 + B + i]);
    }
  }
  p.stage = Stage::LengthsGathered;
}

void Balancer::stage2_gather_candidate_lengths_and_plan(Pending& p) {
  if (p.stage != Stage::LengthsGathered) {
    throw ProtocolError("balancer: stage 2 before stage 1");
  }
  // Receive buffers are sized from stage 1's candidate counts; this is the
  // sequential dependency between the two gathers.
  std::vector<std::uint64_t> mine;
  for (const auto& s : p.raw->samples) {
    for (const auto& cand : s.candidates) mine.push_back(cand.size());
  }
  auto gathered = comm_.all_gather(comm::pack_u64s(mine), {Channel::Side, Category::Balancer,
                                                           config_.mode, false});
  const int world = comm_.world_size();
  std::size_t meta_cursor = 0;
  for (int r = 0; r < world; ++r) {
    auto lens = comm::unpack_u64s(gathered[static_cast<std::size_t>(r)]);
    std::uint64_t expected = 0;
    std::size_t rank_begin = meta_cursor;
    std::vector<std::size_t> per_sample;
    while (meta_cursor < p.metas.size() && p.metas[meta_cursor].origin_rank == r) {
      expected += p.metas[meta_cursor].num_candidates;
      per_sample.push_back(p.metas[meta_cursor].num_candidates);
      ++meta_cursor;
    }
    if (lens.size() != expected) {
      throw ProtocolError("balancer: rank " + std::to_string(r) + " sent " +
                          std::to_string(lens.size()) + " candidate lengths, stage 1 announced " +
                          std::to_string(expected));
    }
    // jagged view over the flat gather: one segment of candidate lengths per
    // sample, sized by stage 1's counts
    IdJagged rank_lens(std::move(lens), std::move(per_sample));
    for (std::size_t m = rank_begin; m < meta_cursor; ++m) {
      auto seg = rank_lens.segment(m - rank_begin);
      p.metas[m].candidate_lens.assign(seg.begin(), seg.end());
    }
  }

  const int world_size = comm_.world_size();
  if (config_.partition == "fbs") {
    p.plan = partition::fbs_partition(p.metas, world_size);
  } else if (config_.partition == "vbs") {
    if (tune_.initialized) {
      bool have_times = false;
      for (double t : p.world_times) have_times = have_times || t > 0;
      if (have_times) {
        std::vector<double> times = p.world_times;
        for (auto& t : times) t = std::max(t, 1e-9);
        partition::autotune_update(tune_, times);
      }
    }
    p.plan = partition::vbs_partition(p.metas, world_size, config_.alpha, &tune_);
  } else if (config_.partition == "none") {
    p.plan = partition::identity_partition(p.metas, world_size);
  } else if (config_.partition.rfind("custom:", 0) == 0) {
    const std::string name = config_.partition.substr(7);
    const partition::PartitionFn* fn = pipeline::find_partitioner(name);
    if (fn == nullptr) throw ConfigError("balancer: unknown custom partitioner '" + name + "'");
    p.plan = partition::custom_partition(*fn, p.metas, world_size);
  } else {
    throw ConfigError("balancer: unknown partition '" + config_.partition + "'");
  }
  p.plan.validate(p.metas.size(), config_.partition == "fbs");
  p.stage = Stage::CandidatesGathered;
}

void Balancer::stage3_shuffle(Pending& p) {
  if (p.stage != Stage::CandidatesGathered) {
    throw ProtocolError("balancer: stage 3 before stage 2");
  }
  const int world = comm_.world_size();
  const auto lists = p.plan.exchange_lists(p.metas);
  const auto& my_sends = lists[static_cast<std::size_t>(comm_.rank())];
  std::vector<Bytes> payloads(static_cast<std::size_t>(world));
  for (int dst = 0; dst < world; ++dst) {
    Bytes& out = payloads[static_cast<std::size_t>(dst)];
    for (int local : my_sends[static_cast<std::size_t>(dst)]) {
      std::vector<std::uint8_t> rec;
      workload::encode_sample(p.raw->samples.at(static_cast<std::size_t>(local)), rec);
      const std::uint32_t len = static_cast<std::uint32_t>(rec.size());
      const std::size_t at = out.size();
      out.resize(at + 4 + rec.size());
      std::memcpy(out.data() + at, &len, 4);
      std::memcpy(out.data() + at + 4, rec.data(), rec.size());
    }
  }
  p.shuffled.value = comm_.all_to_all(payloads, {Channel::Side, Category::Balancer,
                                                 config_.mode, false});
  p.shuffled.category = Category::Balancer;
  p.shuffled.ready_time = comm_.clock() ? comm_.clock()->side_time() : 0.0;
  for (const auto& b : p.shuffled.value) p.shuffled.bytes += b.size();
  p.stage = Stage::Shuffled;
}

workload::Batch Balancer::assemble(Pending& p) {
  const int me = comm_.rank();
  // Per-src cursors walk the received blobs in the destination's consumption
  // order, which is exactly how the sender serialized them.
  std::vector<std::size_t> cursor(p.shuffled.value.size(), 0);
  workload::Batch out;
  out.rank = me;
  for (std::size_t g : p.plan.receive_order[static_cast<std::size_t>(me)]) {
    const int src = p.metas[g].origin_rank;
    const Bytes& blob = p.shuffled.value[static_cast<std::size_t>(src)];
    std::size_t& at = cursor[static_cast<std::size_t>(src)];
    if (at + 4 > blob.size()) throw ProtocolError("balancer: stage-3 payload shorter than the plan");
    std::uint32_t len = 0;
    std::memcpy(&len, blob.data() + at, 4);
    at += 4;
    if (at + len > blob.size()) throw ProtocolError("balancer: stage-3 record truncated");
    std::size_t consumed = 0;
    out.samples.push_back(workload::decode_sample(blob.data() + at, len, consumed));
    if (consumed != len) throw ProtocolError("balancer: stage-3 record has trailing bytes");
    at += len;
  }
  for (std::size_t src = 0; src < cursor.size(); ++src) {
    if (cursor[src] != p.shuffled.value[src].size()) {
      throw ProtocolError("balancer: stage-3 payload from rank " + std::to_string(src) +
                          " longer than the plan");
    }
  }
  return out;
}

workload::Batch Balancer::take(int iteration) {
  Pending* p = pending_for(iteration, false);
  if (p == nullptr || p->stage != Stage::Shuffled) {
    throw ProtocolError("balancer: batch " + std::to_string(iteration) +
                        " consumed before stage 3 completed");
  }
  comm_.wait_handle(p->shuffled);
  workload::Batch out = p->balanced ? std::move(*p->balanced) : assemble(*p);
  while (!pending_.empty() && pending_.front().index <= iteration) pending_.pop_front();
  return out;
}

const workload::Batch* Balancer::peek(int iteration) {
  Pending* p = pending_for(iteration, false);
  if (p == nullptr) return nullptr;
  if (p->stage != Stage::Shuffled) {
    throw ProtocolError("balancer: peek at batch " + std::to_string(iteration) +
                        " before stage 3 completed");
  }
  if (!p->balanced) p->balanced = assemble(*p);
  return &*p->balanced;
}

}  // namespace freescale::balancer

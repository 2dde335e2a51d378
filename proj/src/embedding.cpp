#include "freescale/embedding.hpp"

#include <algorithm>
#include <cstring>

#include "freescale/rng.hpp"

namespace freescale::embedding {

namespace {

std::vector<std::uint64_t> sorted_unique(std::vector<std::uint64_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

std::vector<std::uint64_t> intersect_sorted(std::span<const std::uint64_t> a,
                                            std::span<const std::uint64_t> b) {
  std::vector<std::uint64_t> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

bool member(std::span<const std::uint64_t> sorted, std::uint64_t x) {
  return std::binary_search(sorted.begin(), sorted.end(), x);
}

// [u64 count][ids][rows]
comm::Bytes encode_id_rows(std::span<const std::uint64_t> ids, std::span<const double> rows) {
  comm::Bytes out(sizeof(std::uint64_t) * (1 + ids.size()) + sizeof(double) * rows.size());
  std::uint64_t n = ids.size();
  std::size_t at = 0;
  std::memcpy(out.data() + at, &n, 8);
  at += 8;
  if (!ids.empty()) std::memcpy(out.data() + at, ids.data(), ids.size() * 8);
  at += ids.size() * 8;
  if (!rows.empty()) std::memcpy(out.data() + at, rows.data(), rows.size() * 8);
  return out;
}

void decode_id_rows(const comm::Bytes& b, std::uint32_t dim, std::vector<std::uint64_t>& ids,
                    std::vector<double>& rows) {
  if (b.size() < 8) throw ProtocolError("embedding: short id/row payload");
  std::uint64_t n = 0;
  std::memcpy(&n, b.data(), 8);
  const std::size_t want = 8 + n * 8 + n * static_cast<std::size_t>(dim) * 8;
  if (b.size() != want) throw ProtocolError("embedding: id/row payload size mismatch");
  ids.resize(n);
  rows.resize(n * dim);
  if (n > 0) {
    std::memcpy(ids.data(), b.data() + 8, n * 8);
    std::memcpy(rows.data(), b.data() + 8 + n * 8, n * static_cast<std::size_t>(dim) * 8);
  }
}

}  // namespace

double initial_value(std::uint64_t seed, std::uint64_t row, std::uint32_t d) {
  std::uint64_t state = seed + row * 0x9e3779b97f4a7c15ULL +
                        (static_cast<std::uint64_t>(d) + 1) * 0xbf58476d1ce4e5b9ULL;
  rng_next(state);
  return (rng_double(state) - 0.5) * 0.2;
}

IndexSet IndexSet::batch_major(IdJagged ids) {
  IndexSet s;
  s.layout = IndexLayout::BatchMajor;
  s.unique_ids = sorted_unique(ids.values());
  s.ids = std::move(ids);
  return s;
}

IndexSet IndexSet::shard_major(IdJagged ids) {
  IndexSet s;
  s.layout = IndexLayout::ShardMajor;
  s.unique_ids = sorted_unique(ids.values());
  s.ids = std::move(ids);
  return s;
}

CollisionSplit compute_collision(const IndexSet& cur, const IndexSet& next) {
  if (cur.layout != IndexLayout::ShardMajor || next.layout != IndexLayout::ShardMajor) {
    throw std::invalid_argument("compute_collision: both index sets must be shard-major");
  }
  CollisionSplit split;
  split.collision = intersect_sorted(cur.unique_ids, next.unique_ids);
  std::set_difference(cur.unique_ids.begin(), cur.unique_ids.end(), split.collision.begin(),
                      split.collision.end(), std::back_inserter(split.exclusive_cur));
  std::set_difference(next.unique_ids.begin(), next.unique_ids.end(), split.collision.begin(),
                      split.collision.end(), std::back_inserter(split.exclusive_next));
  return split;
}

double collision_pct(const IndexSet& cur, const IndexSet& next) {
  if (cur.layout != IndexLayout::ShardMajor || next.layout != IndexLayout::ShardMajor) {
    throw std::invalid_argument("collision_pct: both index sets must be shard-major");
  }
  if (next.unique_ids.empty()) {
    throw std::invalid_argument("collision_pct: next iteration uses no rows");
  }
  const auto co = intersect_sorted(cur.unique_ids, next.unique_ids);
  return static_cast<double>(co.size()) / static_cast<double>(next.unique_ids.size());
}

// ---- ShardView -------------------------------------------------------------

ShardView::ShardView(TableGeometry geom, int shard_id, double learning_rate, std::uint64_t seed)
    : geom_(geom), shard_(shard_id), lr_(learning_rate) {
  const std::uint64_t rows = geom_.local_rows(shard_);
  values_.resize(rows * geom_.dim);
  for (std::uint64_t l = 0; l < rows; ++l) {
    const std::uint64_t g = static_cast<std::uint64_t>(shard_) +
                            l * static_cast<std::uint64_t>(geom_.num_shards);
    for (std::uint32_t d = 0; d < geom_.dim; ++d) {
      values_[l * geom_.dim + d] = initial_value(seed, g, d);
    }
  }
}

std::uint64_t ShardView::local_of(std::uint64_t global_id) const {
  if (global_id >= geom_.total_rows) {
    throw std::domain_error("embedding: row id " + std::to_string(global_id) +
                            " out of range (table has " + std::to_string(geom_.total_rows) +
                            " rows)");
  }
  if (geom_.owner(global_id) != shard_) {
    throw std::domain_error("embedding: row id " + std::to_string(global_id) +
                            " is not owned by shard " + std::to_string(shard_));
  }
  return geom_.local_index(global_id);
}

std::span<const double> ShardView::row(std::uint64_t global_id) const {
  const std::uint64_t l = local_of(global_id);
  return std::span<const double>(values_.data() + l * geom_.dim, geom_.dim);
}

std::vector<double> ShardView::lookup(std::span<const std::uint64_t> ids) const {
  std::vector<double> out(ids.size() * geom_.dim);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto r = row(ids[k]);
    std::copy(r.begin(), r.end(), out.begin() + static_cast<std::ptrdiff_t>(k * geom_.dim));
  }
  return out;
}

ShardView::UpdateResult ShardView::apply_gradients(std::span<const std::uint64_t> ids,
                                                   std::span<const double> grads) {
  const std::uint32_t dim = geom_.dim;
  if (grads.size() != ids.size() * dim) {
    throw std::invalid_argument("embedding: gradient shape " + std::to_string(grads.size()) +
                                " misaligned with " + std::to_string(ids.size()) + " ids x dim " +
                                std::to_string(dim));
  }
  UpdateResult res;
  res.unique_ids = sorted_unique(std::vector<std::uint64_t>(ids.begin(), ids.end()));
  std::vector<double> acc(res.unique_ids.size() * dim, 0.0);
  // Per-row sums accumulate in occurrence order (source rank, then position),
  // which pins the floating-point result bit for bit.
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto slot = static_cast<std::size_t>(
        std::lower_bound(res.unique_ids.begin(), res.unique_ids.end(), ids[k]) -
        res.unique_ids.begin());
    for (std::uint32_t d = 0; d < dim; ++d) acc[slot * dim + d] += grads[k * dim + d];
  }
  res.rows.resize(res.unique_ids.size() * dim);
  for (std::size_t u = 0; u < res.unique_ids.size(); ++u) {
    const std::uint64_t l = local_of(res.unique_ids[u]);
    for (std::uint32_t d = 0; d < dim; ++d) {
      double& cell = values_[l * dim + d];
      cell -= lr_ * acc[u * dim + d];
      if (!std::isfinite(cell)) {
        throw std::domain_error("embedding: non-finite value after update of row " +
                                std::to_string(res.unique_ids[u]));
      }
      res.rows[u * dim + d] = cell;
    }
  }
  return res;
}

// ---- routing ---------------------------------------------------------------

ShardRouting route_to_shard_major(comm::Communicator& comm, const TableGeometry& geom,
                                  const IdJagged& batch_ids, const comm::CollectiveOptions& opts) {
  const int p = comm.world_size();
  ShardRouting r;
  r.batch_ids = batch_ids;
  const auto& flat = batch_ids.values();
  r.occ_shard.resize(flat.size());
  r.send_positions.resize(static_cast<std::size_t>(p));
  r.send_ids.resize(static_cast<std::size_t>(p));
  for (std::size_t j = 0; j < flat.size(); ++j) {
    if (flat[j] >= geom.total_rows) {
      throw std::domain_error("embedding: row id " + std::to_string(flat[j]) +
                              " out of range (table has " + std::to_string(geom.total_rows) +
                              " rows)");
    }
    const int s = geom.owner(flat[j]);
    r.occ_shard[j] = s;
    r.send_positions[static_cast<std::size_t>(s)].push_back(j);
    r.send_ids[static_cast<std::size_t>(s)].push_back(flat[j]);
  }
  r.unique_per_shard.resize(static_cast<std::size_t>(p));
  for (int s = 0; s < p; ++s) {
    r.unique_per_shard[static_cast<std::size_t>(s)] = sorted_unique(r.send_ids[static_cast<std::size_t>(s)]);
  }

  std::vector<comm::Bytes> payloads(static_cast<std::size_t>(p));
  for (int s = 0; s < p; ++s) payloads[static_cast<std::size_t>(s)] = comm::pack_u64s(r.send_ids[static_cast<std::size_t>(s)]);
  auto got = comm.all_to_all(payloads, opts);

  std::vector<std::uint64_t> values;
  std::vector<std::size_t> lengths(static_cast<std::size_t>(p));
  r.recv_unique_per_src.resize(static_cast<std::size_t>(p));
  for (int src = 0; src < p; ++src) {
    auto ids = comm::unpack_u64s(got[static_cast<std::size_t>(src)]);
    for (std::uint64_t id : ids) {
      if (geom.owner(id) != comm.rank()) {
        throw ProtocolError("embedding: received row " + std::to_string(id) +
                            " that this shard does not own");
      }
    }
    lengths[static_cast<std::size_t>(src)] = ids.size();
    r.recv_unique_per_src[static_cast<std::size_t>(src)] = sorted_unique(ids);
    values.insert(values.end(), ids.begin(), ids.end());
  }
  r.shard_ids = IndexSet::shard_major(IdJagged(std::move(values), std::move(lengths)));
  return r;
}

// ---- synchronized baseline -------------------------------------------------

SynchronizedEmbedding::SynchronizedEmbedding(ShardView& shard, comm::Communicator& comm)
    : shard_(shard), comm_(comm) {}

std::vector<double> SynchronizedEmbedding::forward(const IdJagged& ids) {
  const int p = comm_.world_size();
  const std::uint32_t dim = shard_.geometry().dim;
  route_ = route_to_shard_major(comm_, shard_.geometry(), ids,
                                {Channel::Main, Category::Ids, comm::CollectiveMode::Fused, false});

  std::vector<comm::Bytes> payloads(static_cast<std::size_t>(p));
  for (int src = 0; src < p; ++src) {
    auto seg = route_->shard_ids.ids.segment(static_cast<std::size_t>(src));
    payloads[static_cast<std::size_t>(src)] = comm::pack_f64s(shard_.lookup(seg));
  }
  auto got = comm_.all_to_all(
      payloads, {Channel::Main, Category::Embedding, comm::CollectiveMode::Fused, false});

  std::vector<double> out(route_->occurrences() * dim);
  for (int s = 0; s < p; ++s) {
    const auto rows = comm::unpack_f64s(got[static_cast<std::size_t>(s)]);
    const auto& positions = route_->send_positions[static_cast<std::size_t>(s)];
    if (rows.size() != positions.size() * dim) {
      throw ProtocolError("embedding: lookup reply shape mismatch from shard " + std::to_string(s));
    }
    for (std::size_t k = 0; k < positions.size(); ++k) {
      std::copy(rows.begin() + static_cast<std::ptrdiff_t>(k * dim),
                rows.begin() + static_cast<std::ptrdiff_t>((k + 1) * dim),
                out.begin() + static_cast<std::ptrdiff_t>(positions[k] * dim));
    }
  }
  return out;
}

void SynchronizedEmbedding::backward(std::span<const double> grads) {
  if (!route_) throw ProtocolError("embedding: backward before forward");
  const int p = comm_.world_size();
  const std::uint32_t dim = shard_.geometry().dim;
  if (grads.size() != route_->occurrences() * dim) {
    throw std::invalid_argument("embedding: gradient count does not match forward occurrences");
  }

  std::vector<comm::Bytes> payloads(static_cast<std::size_t>(p));
  for (int s = 0; s < p; ++s) {
    const auto& positions = route_->send_positions[static_cast<std::size_t>(s)];
    std::vector<double> rows(positions.size() * dim);
    for (std::size_t k = 0; k < positions.size(); ++k) {
      std::copy(grads.begin() + static_cast<std::ptrdiff_t>(positions[k] * dim),
                grads.begin() + static_cast<std::ptrdiff_t>((positions[k] + 1) * dim),
                rows.begin() + static_cast<std::ptrdiff_t>(k * dim));
    }
    payloads[static_cast<std::size_t>(s)] = comm::pack_f64s(rows);
  }
  auto got = comm_.all_to_all(
      payloads, {Channel::Main, Category::Gradient, comm::CollectiveMode::Fused, false});

  std::vector<double> grads_flat;
  for (int src = 0; src < p; ++src) {
    auto rows = comm::unpack_f64s(got[static_cast<std::size_t>(src)]);
    grads_flat.insert(grads_flat.end(), rows.begin(), rows.end());
  }
  shard_.apply_gradients(route_->shard_ids.ids.values(), grads_flat);
  route_.reset();
}

// ---- prioritized protocol ----------------------------------------------------

PrioritizedEmbedding::PrioritizedEmbedding(ShardView& shard, comm::Communicator& comm,
                                           comm::CollectiveMode mode)
    : shard_(shard), comm_(comm), mode_(mode) {
  const auto p = static_cast<std::size_t>(comm_.world_size());
  mask_co_.resize(p);
  mask_ex_.resize(p);
  pending_ex_grads_.resize(p);
}

comm::CollectiveOptions PrioritizedEmbedding::side(Category cat) const {
  return {Channel::Side, cat, mode_, false};
}

void PrioritizedEmbedding::apply_deferred_exclusive() {
  const int p = comm_.world_size();
  if (!has_pending_) return;
  std::vector<comm::Bytes> payloads(static_cast<std::size_t>(p));
  for (int s = 0; s < p; ++s) {
    payloads[static_cast<std::size_t>(s)] = comm::pack_f64s(pending_ex_grads_[static_cast<std::size_t>(s)]);
  }
  auto got = comm_.all_to_all(payloads, side(Category::Gradient));

  // The owner reconstructs the occurrence ids by filtering its stored
  // segments with the pair's exclusive set; same predicate and base order as
  // the sender's split, so ids and gradient rows stay aligned.
  std::vector<std::uint64_t> ids_flat;
  std::vector<double> grads_flat;
  for (int src = 0; src < p; ++src) {
    for (std::uint64_t id : route_prev_->shard_ids.ids.segment(static_cast<std::size_t>(src))) {
      if (member(ex_prev_ids_, id)) ids_flat.push_back(id);
    }
    auto rows = comm::unpack_f64s(got[static_cast<std::size_t>(src)]);
    grads_flat.insert(grads_flat.end(), rows.begin(), rows.end());
  }
  shard_.apply_gradients(ids_flat, grads_flat);
  for (auto& g : pending_ex_grads_) g.clear();
  has_pending_ = false;
  route_prev_.reset();
}

std::vector<double> PrioritizedEmbedding::forward(const IdJagged& ids_cur, const IdJagged* ids_next) {
  if (forward_done_) throw ProtocolError("embedding: forward called twice in one iteration");
  const int p = comm_.world_size();
  const std::uint32_t dim = shard_.geometry().dim;

  const bool bootstrap = iter_ == 0;
  if (bootstrap) {
    route_cur_ = route_to_shard_major(comm_, shard_.geometry(), ids_cur,
                                      {Channel::Main, Category::Ids, mode_, false});
  } else {
    if (!route_cur_) throw ProtocolError("embedding: missing context for iteration");
    apply_deferred_exclusive();
  }

  // Prepare iteration i+1 on the side lane: route, collide, prefetch, masks.
  comm::Handle<EmbBuffer> next_exclusive;
  next_exclusive.category = Category::Embedding;
  if (ids_next != nullptr) {
    route_next_ = route_to_shard_major(comm_, shard_.geometry(), *ids_next, side(Category::Ids));
    const CollisionSplit split = compute_collision(route_cur_->shard_ids, route_next_->shard_ids);
    co_ids_ = split.collision;
    ex_cur_ids_ = split.exclusive_cur;

    IterationStats st;
    st.collision_rows = co_ids_.size();
    st.unique_next_rows = route_next_->shard_ids.unique_ids.size();
    st.collision_fraction =
        st.unique_next_rows > 0
            ? static_cast<double>(st.collision_rows) / static_cast<double>(st.unique_next_rows)
            : 0.0;
    stats_.push_back(st);

    // Exclusive prefetch for i+1, delivered batch-major with the ids so the
    // merge can scatter by row id.
    std::vector<comm::Bytes> payloads(static_cast<std::size_t>(p));
    for (int src = 0; src < p; ++src) {
      auto want = intersect_sorted(route_next_->recv_unique_per_src[static_cast<std::size_t>(src)],
                                   split.exclusive_next);
      payloads[static_cast<std::size_t>(src)] = encode_id_rows(want, shard_.lookup(want));
    }
    auto got = comm_.all_to_all(payloads, side(Category::Embedding));
    next_exclusive.value.ids.resize(static_cast<std::size_t>(p));
    next_exclusive.value.rows.resize(static_cast<std::size_t>(p));
    for (int s = 0; s < p; ++s) {
      decode_id_rows(got[static_cast<std::size_t>(s)], dim,
                     next_exclusive.value.ids[static_cast<std::size_t>(s)],
                     next_exclusive.value.rows[static_cast<std::size_t>(s)]);
      next_exclusive.bytes += got[static_cast<std::size_t>(s)].size();
    }
    next_exclusive.ready_time = comm_.clock() ? comm_.clock()->side_time() : 0.0;

    // Masks for splitting this iteration's gradients.
    std::vector<comm::Bytes> co_payloads(static_cast<std::size_t>(p)), ex_payloads(static_cast<std::size_t>(p));
    for (int src = 0; src < p; ++src) {
      co_payloads[static_cast<std::size_t>(src)] = comm::pack_u64s(
          intersect_sorted(route_cur_->recv_unique_per_src[static_cast<std::size_t>(src)], co_ids_));
      ex_payloads[static_cast<std::size_t>(src)] = comm::pack_u64s(intersect_sorted(
          route_cur_->recv_unique_per_src[static_cast<std::size_t>(src)], split.exclusive_cur));
    }
    auto co_got = comm_.all_to_all(co_payloads, side(Category::Ids));
    auto ex_got = comm_.all_to_all(ex_payloads, side(Category::Ids));
    for (int s = 0; s < p; ++s) {
      mask_co_[static_cast<std::size_t>(s)] = comm::unpack_u64s(co_got[static_cast<std::size_t>(s)]);
      mask_ex_[static_cast<std::size_t>(s)] = comm::unpack_u64s(ex_got[static_cast<std::size_t>(s)]);
      if (!intersect_sorted(mask_co_[static_cast<std::size_t>(s)], mask_ex_[static_cast<std::size_t>(s)]).empty()) {
        throw ProtocolError("embedding: a row appears in both collision and exclusive masks");
      }
    }
  } else {
    // Final iteration: nothing collides with a nonexistent successor.
    route_next_.reset();
    co_ids_.clear();
    ex_cur_ids_ = route_cur_->shard_ids.unique_ids;
    for (int s = 0; s < p; ++s) {
      mask_co_[static_cast<std::size_t>(s)].clear();
      mask_ex_[static_cast<std::size_t>(s)] = route_cur_->unique_per_shard[static_cast<std::size_t>(s)];
    }
    IterationStats st;
    stats_.push_back(st);
  }

  std::vector<double> out;
  if (bootstrap) {
    // Blocking synchronized lookup serves iteration 0.
    std::vector<comm::Bytes> payloads(static_cast<std::size_t>(p));
    for (int src = 0; src < p; ++src) {
      auto seg = route_cur_->shard_ids.ids.segment(static_cast<std::size_t>(src));
      payloads[static_cast<std::size_t>(src)] = comm::pack_f64s(shard_.lookup(seg));
    }
    auto got = comm_.all_to_all(payloads, {Channel::Main, Category::Embedding, mode_, false});
    out.resize(route_cur_->occurrences() * dim);
    for (int s = 0; s < p; ++s) {
      const auto rows = comm::unpack_f64s(got[static_cast<std::size_t>(s)]);
      const auto& positions = route_cur_->send_positions[static_cast<std::size_t>(s)];
      if (rows.size() != positions.size() * dim) {
        throw ProtocolError("embedding: bootstrap lookup shape mismatch");
      }
      for (std::size_t k = 0; k < positions.size(); ++k) {
        std::copy(rows.begin() + static_cast<std::ptrdiff_t>(k * dim),
                  rows.begin() + static_cast<std::ptrdiff_t>((k + 1) * dim),
                  out.begin() + static_cast<std::ptrdiff_t>(positions[k] * dim));
      }
    }
  } else {
    out = merge_current(ids_cur);
  }

  exclusive_handle_ = std::move(next_exclusive);
  forward_done_ = true;
  return out;
}

std::vector<double> PrioritizedEmbedding::merge_current(const IdJagged& ids_cur) {
  const std::uint32_t dim = shard_.geometry().dim;
  comm_.wait_handle(exclusive_handle_);
  comm_.wait_handle(collision_handle_);
  const EmbBuffer& ex = exclusive_handle_.value;
  const EmbBuffer& co = collision_handle_.value;

  const auto& flat = ids_cur.values();
  if (flat.size() != route_cur_->occurrences()) {
    throw ProtocolError("embedding: current batch does not match the prefetched ids");
  }
  std::vector<double> out(flat.size() * dim);
  auto scatter_from = [&](const std::vector<std::uint64_t>& ids, const std::vector<double>& rows,
                          std::uint64_t id, std::size_t j) -> bool {
    auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) return false;
    const auto u = static_cast<std::size_t>(it - ids.begin());
    std::copy(rows.begin() + static_cast<std::ptrdiff_t>(u * dim),
              rows.begin() + static_cast<std::ptrdiff_t>((u + 1) * dim),
              out.begin() + static_cast<std::ptrdiff_t>(j * dim));
    return true;
  };
  for (std::size_t j = 0; j < flat.size(); ++j) {
    const auto s = static_cast<std::size_t>(route_cur_->occ_shard[j]);
    if (!scatter_from(ex.ids[s], ex.rows[s], flat[j], j) &&
        !scatter_from(co.ids[s], co.rows[s], flat[j], j)) {
      throw ProtocolError("embedding: row " + std::to_string(flat[j]) +
                          " missing from both prefetched buffers");
    }
  }
  return out;
}

void PrioritizedEmbedding::backward(std::span<const double> grads) {
  if (!forward_done_) throw ProtocolError("embedding: backward before forward");
  const int p = comm_.world_size();
  const std::uint32_t dim = shard_.geometry().dim;
  if (grads.size() != route_cur_->occurrences() * dim) {
    throw std::invalid_argument("embedding: gradient count does not match forward occurrences");
  }

  comm::Handle<EmbBuffer> next_collision;
  next_collision.category = Category::Embedding;
  next_collision.value.ids.resize(static_cast<std::size_t>(p));
  next_collision.value.rows.resize(static_cast<std::size_t>(p));
  std::uint64_t blocking_bytes = 0;

  ShardView::UpdateResult update;
  if (iter_ == 0) {
    // Bootstrap: one fully synchronized update covering all of iteration 0.
    std::vector<comm::Bytes> payloads(static_cast<std::size_t>(p));
    for (int s = 0; s < p; ++s) {
      const auto& positions = route_cur_->send_positions[static_cast<std::size_t>(s)];
      std::vector<double> rows(positions.size() * dim);
      for (std::size_t k = 0; k < positions.size(); ++k) {
        std::copy(grads.begin() + static_cast<std::ptrdiff_t>(positions[k] * dim),
                  grads.begin() + static_cast<std::ptrdiff_t>((positions[k] + 1) * dim),
                  rows.begin() + static_cast<std::ptrdiff_t>(k * dim));
      }
      payloads[static_cast<std::size_t>(s)] = comm::pack_f64s(rows);
    }
    auto got = comm_.all_to_all(payloads, {Channel::Main, Category::Gradient, mode_, false});
    std::vector<double> grads_flat;
    for (int src = 0; src < p; ++src) {
      auto rows = comm::unpack_f64s(got[static_cast<std::size_t>(src)]);
      grads_flat.insert(grads_flat.end(), rows.begin(), rows.end());
    }
    update = shard_.apply_gradients(route_cur_->shard_ids.ids.values(), grads_flat);
    has_pending_ = false;
  } else {
    // Split this iteration's gradients by the routed masks.
    std::vector<std::vector<double>> co_rows(static_cast<std::size_t>(p));
    for (auto& g : pending_ex_grads_) g.clear();
    for (int s = 0; s < p; ++s) {
      const auto& positions = route_cur_->send_positions[static_cast<std::size_t>(s)];
      const auto& ids = route_cur_->send_ids[static_cast<std::size_t>(s)];
      for (std::size_t k = 0; k < positions.size(); ++k) {
        auto& bucket = member(mask_co_[static_cast<std::size_t>(s)], ids[k])
                           ? co_rows[static_cast<std::size_t>(s)]
                           : pending_ex_grads_[static_cast<std::size_t>(s)];
        bucket.insert(bucket.end(), grads.begin() + static_cast<std::ptrdiff_t>(positions[k] * dim),
                      grads.begin() + static_cast<std::ptrdiff_t>((positions[k] + 1) * dim));
      }
    }
    has_pending_ = true;

    // Collision gradients are expedited: route, update, and push the fresh
    // rows back batch-major for the next forward's merge.
    std::vector<comm::Bytes> payloads(static_cast<std::size_t>(p));
    for (int s = 0; s < p; ++s) {
      payloads[static_cast<std::size_t>(s)] = comm::pack_f64s(co_rows[static_cast<std::size_t>(s)]);
      blocking_bytes += payloads[static_cast<std::size_t>(s)].size();
    }
    auto got = comm_.all_to_all(payloads, side(Category::Gradient));
    std::vector<std::uint64_t> ids_flat;
    std::vector<double> grads_flat;
    for (int src = 0; src < p; ++src) {
      for (std::uint64_t id : route_cur_->shard_ids.ids.segment(static_cast<std::size_t>(src))) {
        if (member(co_ids_, id)) ids_flat.push_back(id);
      }
      auto rows = comm::unpack_f64s(got[static_cast<std::size_t>(src)]);
      blocking_bytes += got[static_cast<std::size_t>(src)].size();
      grads_flat.insert(grads_flat.end(), rows.begin(), rows.end());
    }
    update = shard_.apply_gradients(ids_flat, grads_flat);
  }

  if (route_next_) {
    // E_co^{i+1}: freshly updated collision rows, delivered to next-iteration
    // requesters.
    std::vector<comm::Bytes> payloads(static_cast<std::size_t>(p));
    for (int src = 0; src < p; ++src) {
      auto want = intersect_sorted(route_next_->recv_unique_per_src[static_cast<std::size_t>(src)], co_ids_);
      std::vector<double> rows(want.size() * dim);
      for (std::size_t k = 0; k < want.size(); ++k) {
        auto it = std::lower_bound(update.unique_ids.begin(), update.unique_ids.end(), want[k]);
        if (it == update.unique_ids.end() || *it != want[k]) {
          throw ProtocolError("embedding: collision row " + std::to_string(want[k]) +
                              " missing from the update result");
        }
        const auto u = static_cast<std::size_t>(it - update.unique_ids.begin());
        std::copy(update.rows.begin() + static_cast<std::ptrdiff_t>(u * dim),
                  update.rows.begin() + static_cast<std::ptrdiff_t>((u + 1) * dim),
                  rows.begin() + static_cast<std::ptrdiff_t>(k * dim));
      }
      payloads[static_cast<std::size_t>(src)] = encode_id_rows(want, rows);
      blocking_bytes += payloads[static_cast<std::size_t>(src)].size();
    }
    auto got = comm_.all_to_all(payloads, side(Category::Embedding));
    for (int s = 0; s < p; ++s) {
      decode_id_rows(got[static_cast<std::size_t>(s)], dim,
                     next_collision.value.ids[static_cast<std::size_t>(s)],
                     next_collision.value.rows[static_cast<std::size_t>(s)]);
      next_collision.bytes += got[static_cast<std::size_t>(s)].size();
      blocking_bytes += got[static_cast<std::size_t>(s)].size();
    }
    next_collision.ready_time = comm_.clock() ? comm_.clock()->side_time() : 0.0;
  }
  collision_handle_ = std::move(next_collision);

  if (!stats_.empty()) stats_.back().blocking_bytes = blocking_bytes;

  // Rotate the context one iteration forward.
  route_prev_ = std::move(route_cur_);
  ex_prev_ids_ = std::move(ex_cur_ids_);
  ex_cur_ids_.clear();
  route_cur_ = std::move(route_next_);
  route_next_.reset();
  ++iter_;
  forward_done_ = false;
}

void PrioritizedEmbedding::finalize() {
  if (has_pending_) apply_deferred_exclusive();
}

// ---- checkpointing ----------------------------------------------------------

std::vector<double> gather_full_table(comm::Communicator& comm, const ShardView& shard) {
  const auto& geom = shard.geometry();
  auto parts = comm.all_gather(comm::pack_f64s(shard.values()),
                               {Channel::Main, Category::None, comm::CollectiveMode::Fused, true});
  std::vector<double> full(geom.total_rows * geom.dim);
  for (int s = 0; s < geom.num_shards; ++s) {
    const auto vals = comm::unpack_f64s(parts[static_cast<std::size_t>(s)]);
    const std::uint64_t rows = geom.local_rows(s);
    if (vals.size() != rows * geom.dim) {
      throw ProtocolError("embedding: shard " + std::to_string(s) + " checkpoint size mismatch");
    }
    for (std::uint64_t l = 0; l < rows; ++l) {
      const std::uint64_t g = static_cast<std::uint64_t>(s) +
                              l * static_cast<std::uint64_t>(geom.num_shards);
      std::copy(vals.begin() + static_cast<std::ptrdiff_t>(l * geom.dim),
                vals.begin() + static_cast<std::ptrdiff_t>((l + 1) * geom.dim),
                full.begin() + static_cast<std::ptrdiff_t>(g * geom.dim));
    }
  }
  return full;
}

std::vector<std::uint8_t> checkpoint_bytes(const TableGeometry& geom,
                                           std::span<const double> full_table) {
  std::vector<std::uint8_t> out(24 + full_table.size() * 8);
  const std::uint64_t header[3] = {geom.total_rows, geom.dim, static_cast<std::uint64_t>(geom.num_shards)};
  std::memcpy(out.data(), header, 24);
  if (!full_table.empty()) std::memcpy(out.data() + 24, full_table.data(), full_table.size() * 8);
  return out;
}

}  // namespace freescale::embedding

#include "freescale/comm.hpp"

#include <atomic>
#include <cstring>
#include <thread>

namespace freescale::comm {

namespace {

double hop_cost(const LinkParams& link, std::size_t bytes, CostClass cost) {
  switch (cost) {
    case CostClass::Free:
      return 0.0;
    case CostClass::Normal:
      return link.latency_us + static_cast<double>(bytes) / link.bandwidth_bytes_per_us;
    case CostClass::Staged:
      return link.latency_us + static_cast<double>(bytes) / link.bandwidth_bytes_per_us +
             2.0 * (static_cast<double>(bytes) / 1e6) * link.copy_cost_us_per_mb;
  }
  return 0.0;
}

CostClass payload_cost(CollectiveMode mode) {
  return mode == CollectiveMode::SmFree ? CostClass::Staged : CostClass::Normal;
}

}  // namespace

struct InProcessFabric::Impl {
  struct Mailbox {
    std::mutex mu;
    std::condition_variable cv;
    std::map<std::pair<int, std::uint64_t>, std::deque<Delivery>> queues;
    bool poisoned = false;
    std::string poison_msg;
  };

  class Endpoint : public Transport {
   public:
    Endpoint(Impl* impl, int rank) : impl_(impl), rank_(rank) {}
    int rank() const override { return rank_; }
    int world_size() const override { return impl_->world_size; }

    void send(int dst, std::uint64_t tag, Bytes payload, double send_time,
              CostClass cost) override {
      if (dst < 0 || dst >= impl_->world_size) {
        throw CollectiveError("send: destination rank " + std::to_string(dst) + " out of range");
      }
      const LinkParams& link =
          impl_->links[static_cast<std::size_t>(rank_) * static_cast<std::size_t>(impl_->world_size) +
                       static_cast<std::size_t>(dst)];
      Delivery d;
      d.arrival = send_time + hop_cost(link, payload.size(), cost);
      d.payload = std::move(payload);
      if (cost != CostClass::Free) impl_->msg_count.fetch_add(1, std::memory_order_relaxed);
      Mailbox& box = *impl_->boxes[static_cast<std::size_t>(dst)];
      {
        std::lock_guard<std::mutex> lock(box.mu);
        box.queues[{rank_, tag}].push_back(std::move(d));
      }
      box.cv.notify_all();
    }

    Delivery recv(int src, std::uint64_t tag) override {
      Mailbox& box = *impl_->boxes[static_cast<std::size_t>(rank_)];
      std::unique_lock<std::mutex> lock(box.mu);
      const auto key = std::make_pair(src, tag);
      box.cv.wait(lock, [&] {
        if (box.poisoned) return true;
        auto it = box.queues.find(key);
        return it != box.queues.end() && !it->second.empty();
      });
      if (box.poisoned) throw CollectiveError(box.poison_msg);
      auto& q = box.queues[key];
      Delivery d = std::move(q.front());
      q.pop_front();
      return d;
    }

   private:
    Impl* impl_;
    int rank_;
  };

  explicit Impl(int p, LinkParams link)
      : world_size(p), links(static_cast<std::size_t>(p) * static_cast<std::size_t>(p), link) {
    boxes.reserve(static_cast<std::size_t>(p));
    endpoints.reserve(static_cast<std::size_t>(p));
    for (int r = 0; r < p; ++r) {
      boxes.push_back(std::make_unique<Mailbox>());
      endpoints.push_back(std::make_unique<Endpoint>(this, r));
    }
  }

  int world_size;
  std::vector<std::unique_ptr<Mailbox>> boxes;
  std::vector<std::unique_ptr<Endpoint>> endpoints;
  std::vector<LinkParams> links;
  std::atomic<std::uint64_t> msg_count{0};
};

InProcessFabric::InProcessFabric(int world_size, LinkParams link)
    : world_size_(world_size), impl_(std::make_unique<Impl>(world_size, link)) {
  if (world_size < 1) throw std::invalid_argument("fabric: world_size must be >= 1");
}

InProcessFabric::~InProcessFabric() = default;

Transport& InProcessFabric::transport(int rank) {
  return *impl_->endpoints.at(static_cast<std::size_t>(rank));
}

void InProcessFabric::set_link(int src, int dst, LinkParams link) {
  impl_->links.at(static_cast<std::size_t>(src) * static_cast<std::size_t>(world_size_) +
                  static_cast<std::size_t>(dst)) = link;
}

std::uint64_t InProcessFabric::message_count() const {
  return impl_->msg_count.load(std::memory_order_relaxed);
}

void InProcessFabric::reset_message_count() { impl_->msg_count.store(0); }

void InProcessFabric::poison(const std::string& why) {
  for (auto& box : impl_->boxes) {
    {
      std::lock_guard<std::mutex> lock(box->mu);
      box->poisoned = true;
      box->poison_msg = "collective aborted: " + why;
    }
    box->cv.notify_all();
  }
}

void InProcessFabric::run(const std::function<void(int)>& body) {
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(world_size_));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(world_size_));
  for (int r = 0; r < world_size_; ++r) {
    threads.emplace_back([&, r] {
      try {
        body(r);
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
        poison("rank " + std::to_string(r) + " failed");
      }
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---- Communicator --------------------------------------------------------

Communicator::Communicator(Transport& transport, RankClock* clock, EventLog* log)
    : transport_(transport), clock_(clock), log_(log) {}

std::uint64_t Communicator::next_tag(Channel ch, std::uint64_t phase) {
  // One op id per collective; identical across ranks because collectives are
  // issued in the same program order on every rank.
  const auto c = static_cast<std::uint64_t>(ch);
  return (c << 62) | (op_seq_[c] << 8) | phase;
}

double Communicator::finish_collective(Channel ch, Category cat, CollectiveMode mode, double entry,
                                       double completion, std::uint64_t bytes,
                                       bool synchronizing) {
  if (synchronizing && world_size() > 1) completion = time_max(completion);
  if (clock_ != nullptr) {
    clock_->set_channel_time(ch, completion);
    if (ch == Channel::Side && mode == CollectiveMode::Fused && completion > entry) {
      clock_->record_side_comm({entry, completion});
    }
  }
  if (log_ != nullptr) {
    log_->append(Event{iteration_, rank(), ch, EventKind::Collective, cat, entry, completion,
                       bytes});
  }
  return completion;
}

std::vector<Bytes> Communicator::all_gather(const Bytes& local, const CollectiveOptions& opts) {
  const int p = world_size();
  const int me = rank();
  const std::uint64_t tag_size = next_tag(opts.channel, 0);
  const std::uint64_t tag_data = next_tag(opts.channel, 1);
  ++op_seq_[static_cast<std::uint64_t>(opts.channel)];

  const double entry = clock_ ? clock_->collective_entry(opts.channel) : 0.0;
  std::vector<Bytes> out(static_cast<std::size_t>(p));
  if (p == 1) {
    out[0] = local;
    finish_collective(opts.channel, opts.category, opts.mode, entry, entry, local.size(), false);
    return out;
  }

  std::vector<std::uint64_t> sizes(static_cast<std::size_t>(p), 0);
  sizes[static_cast<std::size_t>(me)] = local.size();
  Bytes size_msg = pack_u64s(std::span<const std::uint64_t>(&sizes[static_cast<std::size_t>(me)], 1));
  for (int d = 0; d < p; ++d) {
    if (d != me) transport_.send(d, tag_size, size_msg, entry, CostClass::Normal);
  }
  double t = entry;
  for (int s = 0; s < p; ++s) {
    if (s == me) continue;
    Delivery d = transport_.recv(s, tag_size);
    sizes[static_cast<std::size_t>(s)] = unpack_u64s(d.payload).at(0);
    t = std::max(t, d.arrival);
  }

  if (opts.mode == CollectiveMode::SmFree) {
    // The SM-free path gathers over the staged chunked ring.
    const int dst = (me + 1) % p;
    const int src = (me + p - 1) % p;
    out[static_cast<std::size_t>(me)] = local;
    std::uint64_t bytes = 0;
    for (int stage = 0; stage < p - 1; ++stage) {
      const int send_idx = ((me - stage) % p + p) % p;
      const int recv_idx = ((me - 1 - stage) % p + p) % p;
      transport_.send(dst, tag_data, out[static_cast<std::size_t>(send_idx)], t, CostClass::Staged);
      bytes += out[static_cast<std::size_t>(send_idx)].size();
      Delivery d = transport_.recv(src, tag_data);
      if (d.payload.size() != sizes[static_cast<std::size_t>(recv_idx)]) {
        throw CollectiveError("all_gather: ring stage " + std::to_string(stage) +
                              " chunk size mismatch from rank " + std::to_string(src));
      }
      bytes += d.payload.size();
      out[static_cast<std::size_t>(recv_idx)] = std::move(d.payload);
      t = std::max(t, d.arrival);
    }
    finish_collective(opts.channel, opts.category, opts.mode, entry, t, bytes, opts.synchronizing);
    return out;
  }

  const CostClass cc = payload_cost(opts.mode);
  for (int d = 0; d < p; ++d) {
    if (d != me) transport_.send(d, tag_data, local, t, cc);
  }
  out[static_cast<std::size_t>(me)] = local;
  std::uint64_t bytes = static_cast<std::uint64_t>(local.size()) * static_cast<std::uint64_t>(p - 1);
  double done = t;
  for (int s = 0; s < p; ++s) {
    if (s == me) continue;
    Delivery d = transport_.recv(s, tag_data);
    if (d.payload.size() != sizes[static_cast<std::size_t>(s)]) {
      throw CollectiveError("all_gather: rank " + std::to_string(s) + " announced " +
                            std::to_string(sizes[static_cast<std::size_t>(s)]) + " bytes but sent " +
                            std::to_string(d.payload.size()));
    }
    bytes += d.payload.size();
    out[static_cast<std::size_t>(s)] = std::move(d.payload);
    done = std::max(done, d.arrival);
  }
  finish_collective(opts.channel, opts.category, opts.mode, entry, done, bytes, opts.synchronizing);
  return out;
}

std::vector<Bytes> Communicator::ring_all_gather(const Bytes& local,
                                                 std::span<const std::uint64_t> sizes,
                                                 const CollectiveOptions& opts) {
  const int p = world_size();
  const int me = rank();
  if (sizes.size() != static_cast<std::size_t>(p)) {
    throw CollectiveError("ring_all_gather: need one chunk size per rank");
  }
  if (sizes[static_cast<std::size_t>(me)] != local.size()) {
    throw CollectiveError("ring_all_gather: local chunk size " + std::to_string(local.size()) +
                          " does not match metadata " +
                          std::to_string(sizes[static_cast<std::size_t>(me)]));
  }
  const std::uint64_t tag = next_tag(opts.channel, 1);
  ++op_seq_[static_cast<std::uint64_t>(opts.channel)];

  const double entry = clock_ ? clock_->collective_entry(opts.channel) : 0.0;
  std::vector<Bytes> chunks(static_cast<std::size_t>(p));
  chunks[static_cast<std::size_t>(me)] = local;
  if (p == 1) {
    finish_collective(opts.channel, opts.category, opts.mode, entry, entry, local.size(), false);
    return chunks;
  }

  const int dst = (me + 1) % p;
  const int src = (me + p - 1) % p;
  const CostClass cc = payload_cost(opts.mode);
  double t = entry;
  std::uint64_t bytes = 0;
  for (int stage = 0; stage < p - 1; ++stage) {
    const int send_idx = ((me - stage) % p + p) % p;
    const int recv_idx = ((me - 1 - stage) % p + p) % p;
    transport_.send(dst, tag, chunks[static_cast<std::size_t>(send_idx)], t, cc);
    bytes += chunks[static_cast<std::size_t>(send_idx)].size();
    Delivery d = transport_.recv(src, tag);
    if (d.payload.size() != sizes[static_cast<std::size_t>(recv_idx)]) {
      throw CollectiveError("ring_all_gather: stage " + std::to_string(stage) +
                            " chunk size mismatch from rank " + std::to_string(src));
    }
    bytes += d.payload.size();
    chunks[static_cast<std::size_t>(recv_idx)] = std::move(d.payload);
    t = std::max(t, d.arrival);
  }
  finish_collective(opts.channel, opts.category, opts.mode, entry, t, bytes, opts.synchronizing);
  return chunks;
}

std::vector<Bytes> Communicator::all_to_all(const std::vector<Bytes>& send,
                                            const CollectiveOptions& opts) {
  const int p = world_size();
  const int me = rank();
  if (send.size() != static_cast<std::size_t>(p)) {
    throw CollectiveError("all_to_all: need one payload per destination rank");
  }
  const std::uint64_t tag_size = next_tag(opts.channel, 0);
  const std::uint64_t tag_data = next_tag(opts.channel, 1);
  ++op_seq_[static_cast<std::uint64_t>(opts.channel)];

  const double entry = clock_ ? clock_->collective_entry(opts.channel) : 0.0;
  std::vector<Bytes> out(static_cast<std::size_t>(p));
  out[static_cast<std::size_t>(me)] = send[static_cast<std::size_t>(me)];
  if (p == 1) {
    finish_collective(opts.channel, opts.category, opts.mode, entry, entry,
                      send[0].size(), false);
    return out;
  }

  std::vector<std::uint64_t> expect(static_cast<std::size_t>(p), 0);
  for (int d = 0; d < p; ++d) {
    if (d == me) continue;
    std::uint64_t sz = send[static_cast<std::size_t>(d)].size();
    transport_.send(d, tag_size, pack_u64s(std::span<const std::uint64_t>(&sz, 1)), entry,
                    CostClass::Normal);
  }
  double t = entry;
  for (int s = 0; s < p; ++s) {
    if (s == me) continue;
    Delivery d = transport_.recv(s, tag_size);
    expect[static_cast<std::size_t>(s)] = unpack_u64s(d.payload).at(0);
    t = std::max(t, d.arrival);
  }

  const CostClass cc = payload_cost(opts.mode);
  std::uint64_t bytes = 0;
  for (int d = 0; d < p; ++d) {
    if (d == me) continue;
    transport_.send(d, tag_data, send[static_cast<std::size_t>(d)], t, cc);
    bytes += send[static_cast<std::size_t>(d)].size();
  }
  double done = t;
  for (int s = 0; s < p; ++s) {
    if (s == me) continue;
    Delivery d = transport_.recv(s, tag_data);
    if (d.payload.size() != expect[static_cast<std::size_t>(s)]) {
      throw CollectiveError("all_to_all: rank " + std::to_string(s) + " announced " +
                            std::to_string(expect[static_cast<std::size_t>(s)]) +
                            " bytes but sent " + std::to_string(d.payload.size()));
    }
    bytes += d.payload.size();
    out[static_cast<std::size_t>(s)] = std::move(d.payload);
    done = std::max(done, d.arrival);
  }
  finish_collective(opts.channel, opts.category, opts.mode, entry, done, bytes, opts.synchronizing);
  return out;
}

std::vector<double> Communicator::all_reduce_sum(std::span<const double> local,
                                                 const CollectiveOptions& opts) {
  const int p = world_size();
  const int me = rank();
  const std::uint64_t tag_size = next_tag(opts.channel, 0);
  const std::uint64_t tag_data = next_tag(opts.channel, 1);
  ++op_seq_[static_cast<std::uint64_t>(opts.channel)];

  const double entry = clock_ ? clock_->collective_entry(opts.channel) : 0.0;
  std::vector<double> result(local.begin(), local.end());
  if (p == 1) {
    finish_collective(opts.channel, opts.category, opts.mode, entry, entry,
                      local.size() * sizeof(double), false);
    return result;
  }

  std::uint64_t count = local.size();
  for (int d = 0; d < p; ++d) {
    if (d != me) {
      transport_.send(d, tag_size, pack_u64s(std::span<const std::uint64_t>(&count, 1)), entry,
                      CostClass::Normal);
    }
  }
  double t = entry;
  bool mismatch = false;
  for (int s = 0; s < p; ++s) {
    if (s == me) continue;
    Delivery d = transport_.recv(s, tag_size);
    if (unpack_u64s(d.payload).at(0) != count) mismatch = true;
    t = std::max(t, d.arrival);
  }
  if (mismatch) {
    throw CollectiveError("all_reduce_sum: vector length mismatch across ranks");
  }

  const Bytes mine = pack_f64s(local);
  const CostClass cc = payload_cost(opts.mode);
  for (int d = 0; d < p; ++d) {
    if (d != me) transport_.send(d, tag_data, mine, t, cc);
  }
  std::vector<std::vector<double>> parts(static_cast<std::size_t>(p));
  parts[static_cast<std::size_t>(me)].assign(local.begin(), local.end());
  double done = t;
  std::uint64_t bytes = mine.size() * static_cast<std::uint64_t>(p - 1);
  for (int s = 0; s < p; ++s) {
    if (s == me) continue;
    Delivery d = transport_.recv(s, tag_data);
    bytes += d.payload.size();
    parts[static_cast<std::size_t>(s)] = unpack_f64s(d.payload);
    done = std::max(done, d.arrival);
  }
  // Fixed summation order 0..p-1 keeps the result bitwise identical across
  // runs and ranks.
  std::fill(result.begin(), result.end(), 0.0);
  for (int s = 0; s < p; ++s) {
    const auto& v = parts[static_cast<std::size_t>(s)];
    for (std::size_t i = 0; i < result.size(); ++i) result[i] += v[i];
  }
  finish_collective(opts.channel, opts.category, opts.mode, entry, done, bytes, opts.synchronizing);
  return result;
}

double Communicator::time_max(double t) {
  const int p = world_size();
  const int me = rank();
  if (p == 1) return t;
  const std::uint64_t tag = next_tag(Channel::Main, 2);
  ++op_seq_[static_cast<std::uint64_t>(Channel::Main)];
  Bytes msg(sizeof(double));
  std::memcpy(msg.data(), &t, sizeof(double));
  for (int d = 0; d < p; ++d) {
    if (d != me) transport_.send(d, tag, msg, t, CostClass::Free);
  }
  double mx = t;
  for (int s = 0; s < p; ++s) {
    if (s == me) continue;
    Delivery d = transport_.recv(s, tag);
    double other;
    std::memcpy(&other, d.payload.data(), sizeof(double));
    mx = std::max(mx, other);
  }
  return mx;
}

void Communicator::log_compute(double duration, double penalty) {
  if (clock_ == nullptr) return;
  Interval iv = clock_->advance_compute(duration, penalty);
  if (log_ != nullptr && iv.end > iv.start) {
    log_->append(Event{iteration_, rank(), Channel::Main, EventKind::Compute, Category::None,
                       iv.start, iv.end, 0});
  }
}

Bytes pack_u64s(std::span<const std::uint64_t> v) {
  Bytes out(v.size() * sizeof(std::uint64_t));
  if (!v.empty()) std::memcpy(out.data(), v.data(), out.size());
  return out;
}

std::vector<std::uint64_t> unpack_u64s(const Bytes& b) {
  if (b.size() % sizeof(std::uint64_t) != 0) {
    throw CollectiveError("unpack_u64s: payload not a multiple of 8 bytes");
  }
  std::vector<std::uint64_t> out(b.size() / sizeof(std::uint64_t));
  if (!out.empty()) std::memcpy(out.data(), b.data(), b.size());
  return out;
}

Bytes pack_f64s(std::span<const double> v) {
  Bytes out(v.size() * sizeof(double));
  if (!v.empty()) std::memcpy(out.data(), v.data(), out.size());
  return out;
}

std::vector<double> unpack_f64s(const Bytes& b) {
  if (b.size() % sizeof(double) != 0) {
    throw CollectiveError("unpack_f64s: payload not a multiple of 8 bytes");
  }
  std::vector<double> out(b.size() / sizeof(double));
  if (!out.empty()) std::memcpy(out.data(), b.data(), b.size());
  return out;
}

}  // namespace freescale::comm

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "freescale/errors.hpp"
#include "freescale/events.hpp"

namespace freescale::comm {

using Bytes = std::vector<std::uint8_t>;

/// How the staged (SM-free) path differs from the fused path: staged messages
/// pay a copy-through-host cost on each hop but never contend with compute;
/// fused messages skip the copies and instead charge the overlap penalty to
/// concurrent compute.
enum class CollectiveMode : std::uint8_t { Fused, SmFree };

enum class CostClass : std::uint8_t { Normal, Staged, Free };

struct LinkParams {
  double latency_us = 5.0;
  double bandwidth_bytes_per_us = 25000.0;  // 25 GB/s
  double copy_cost_us_per_mb = 40.0;        // one direction; staged hops pay it twice
};

struct Delivery {
  Bytes payload;
  double arrival = 0.0;  // logical; 0 on wall transports
};

/// Point-to-point rank transport with exactly-once delivery and per
/// (src,dst,tag) FIFO ordering.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual int rank() const = 0;
  virtual int world_size() const = 0;
  virtual void send(int dst, std::uint64_t tag, Bytes payload, double send_time,
                    CostClass cost) = 0;
  virtual Delivery recv(int src, std::uint64_t tag) = 0;
};

/// All ranks live in one process; messages move through per-rank mailboxes and
/// the logical delivery time is send_time + latency + size/bandwidth (plus
/// two copy terms for staged messages). Fully deterministic: times depend only
/// on the message graph, never on thread scheduling.
class InProcessFabric {
 public:
  explicit InProcessFabric(int world_size, LinkParams link = {});
  ~InProcessFabric();

  InProcessFabric(const InProcessFabric&) = delete;
  InProcessFabric& operator=(const InProcessFabric&) = delete;

  int world_size() const { return world_size_; }
  Transport& transport(int rank);
  void set_link(int src, int dst, LinkParams link);
  std::uint64_t message_count() const;
  void reset_message_count();

  /// Wake every blocked receiver with a CollectiveError.
  void poison(const std::string& why);

  /// Run `body(rank)` on one thread per rank. If any rank throws, the fabric
  /// is poisoned so peers blocked in collectives fail too, and the lowest
  /// failing rank's exception is rethrown.
  void run(const std::function<void(int)>& body);

 private:
  struct Impl;
  friend struct Impl;
  int world_size_;
  std::unique_ptr<Impl> impl_;
};

struct CollectiveOptions {
  Channel channel = Channel::Main;
  Category category = Category::None;
  CollectiveMode mode = CollectiveMode::Fused;
  bool synchronizing = false;
};

/// The result of an overlapped collective: the value plus the logical time the
/// issuing rank's side lane finished producing it. wait() semantics live on
/// the caller's clock (RankClock::wait_until).
template <typename T>
struct Handle {
  T value{};
  double ready_time = 0.0;
  Category category = Category::None;
  std::uint64_t bytes = 0;
};

/// Per-rank collective facade. Tags are derived from per-channel operation
/// counters, which match across ranks because every rank issues the same
/// collectives in the same program order.
class Communicator {
 public:
  explicit Communicator(Transport& transport, RankClock* clock = nullptr,
                        EventLog* log = nullptr);

  int rank() const { return transport_.rank(); }
  int world_size() const { return transport_.world_size(); }
  RankClock* clock() const { return clock_; }
  void set_iteration(int iteration) { iteration_ = iteration; }
  int iteration() const { return iteration_; }

  /// Every rank contributes one chunk; everyone ends with all chunks in rank
  /// order. Sizes are exchanged first.
  std::vector<Bytes> all_gather(const Bytes& local, const CollectiveOptions& opts);

  /// Staged chunked ring: p-1 stages, each rank forwarding the chunk received
  /// in the previous stage to its clockwise neighbor. Chunk sizes must be
  /// supplied (consistent on all ranks). Result bitwise equals all_gather.
  std::vector<Bytes> ring_all_gather(const Bytes& local, std::span<const std::uint64_t> sizes,
                                     const CollectiveOptions& opts);

  /// send[d] goes to rank d; output slot s holds what rank s sent here.
  /// An 8-byte size exchange precedes the payload round.
  std::vector<Bytes> all_to_all(const std::vector<Bytes>& send, const CollectiveOptions& opts);

  /// Elementwise sum in fixed rank order 0..p-1 (bitwise deterministic).
  std::vector<double> all_reduce_sum(std::span<const double> local,
                                     const CollectiveOptions& opts);

  /// Zero-cost rendezvous: everyone leaves with max over ranks of `t`.
  double time_max(double t);

  /// Record a wait on the main lane for an overlapped result; returns the
  /// waited duration.
  template <typename T>
  double wait_handle(const Handle<T>& h) {
    if (clock_ == nullptr) return 0.0;
    Interval iv = clock_->wait_until(h.ready_time);
    if (iv.end > iv.start && log_ != nullptr) {
      log_->append(Event{iteration_, rank(), Channel::Main, EventKind::Wait, h.category, iv.start,
                         iv.end, h.bytes});
    }
    return iv.end - iv.start;
  }

  void log_compute(double duration, double penalty = 1.0);
  /// Current logical main-lane time (0 without a clock).
  double now_main() const { return clock_ ? clock_->main_time() : 0.0; }

 private:
  std::uint64_t next_tag(Channel ch, std::uint64_t phase);
  double finish_collective(Channel ch, Category cat, CollectiveMode mode, double entry,
                           double completion, std::uint64_t bytes, bool synchronizing);

  Transport& transport_;
  RankClock* clock_;
  EventLog* log_;
  int iteration_ = 0;
  std::uint64_t op_seq_[2] = {0, 0};
};

// Payload helpers shared by the protocol layers.
Bytes pack_u64s(std::span<const std::uint64_t> v);
std::vector<std::uint64_t> unpack_u64s(const Bytes& b);
Bytes pack_f64s(std::span<const double> v);
std::vector<double> unpack_f64s(const Bytes& b);

}  // namespace freescale::comm

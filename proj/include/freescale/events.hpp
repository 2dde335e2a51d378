#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

namespace freescale {

/// Logical execution lanes per rank. Main carries model compute and blocking
/// waits; Side is the ordered queue overlapped collectives run on.
enum class Channel : std::uint8_t { Main, Side };

enum class Category : std::uint8_t { Ids, Embedding, Gradient, Balancer, Dense, None };

enum class EventKind : std::uint8_t { Compute, Collective, Wait };

inline const char* category_name(Category c) {
  switch (c) {
    case Category::Ids: return "ids";
    case Category::Embedding: return "embedding";
    case Category::Gradient: return "gradient";
    case Category::Balancer: return "balancer";
    case Category::Dense: return "dense";
    case Category::None: return "none";
  }
  return "?";
}

struct Event {
  int iteration = 0;
  int rank = 0;
  Channel channel = Channel::Main;
  EventKind kind = EventKind::Compute;
  Category category = Category::None;
  double start = 0.0;
  double end = 0.0;
  std::uint64_t bytes = 0;
};

struct Interval {
  double start = 0.0;
  double end = 0.0;
};

/// Per-rank two-lane logical clock. Compute advances the main lane; fused
/// collectives in flight on the side lane stretch concurrent compute by the
/// overlap penalty factor.
class RankClock {
 public:
  double main_time() const { return main_; }
  double side_time() const { return side_; }

  double channel_time(Channel ch) const { return ch == Channel::Main ? main_ : side_; }

  /// Side ops are enqueued by the main program, so they cannot start before
  /// the enqueue point.
  double collective_entry(Channel ch) const {
    return ch == Channel::Main ? main_ : std::max(side_, main_);
  }

  void set_channel_time(Channel ch, double t) {
    if (ch == Channel::Main) {
      main_ = t;
    } else {
      side_ = t;
    }
  }

  /// Advance main by `duration`, stretched by `penalty` over any portion that
  /// overlaps a recorded in-flight fused side collective.
  Interval advance_compute(double duration, double penalty = 1.0) {
    const double start = main_;
    double end = start + duration;
    if (penalty > 1.0 && !side_comm_.empty()) {
      double overlap = 0.0;
      for (const auto& iv : side_comm_) {
        overlap += std::max(0.0, std::min(end, iv.end) - std::max(start, iv.start));
      }
      end += overlap * (penalty - 1.0);
    }
    main_ = end;
    prune_side_comm(start);
    return {start, end};
  }

  /// Block the main lane until `ready`; returns the waited interval (empty if
  /// already past it).
  Interval wait_until(double ready) {
    const double start = main_;
    if (ready > main_) main_ = ready;
    return {start, main_};
  }

  void record_side_comm(Interval iv) { side_comm_.push_back(iv); }

 private:
  void prune_side_comm(double before) {
    std::erase_if(side_comm_, [&](const Interval& iv) { return iv.end <= before; });
  }

  double main_ = 0.0;
  double side_ = 0.0;
  std::vector<Interval> side_comm_;
};

/// Append-only event trace. Each rank worker writes only its own lane, so no
/// locking; merged() produces a deterministic global order.
class EventLog {
 public:
  explicit EventLog(int num_ranks) : per_rank_(static_cast<std::size_t>(num_ranks)) {}

  void append(Event e) { per_rank_[static_cast<std::size_t>(e.rank)].push_back(e); }

  int num_ranks() const { return static_cast<int>(per_rank_.size()); }

  const std::vector<Event>& rank_events(int rank) const {
    return per_rank_[static_cast<std::size_t>(rank)];
  }

  std::vector<Event> merged() const {
    std::vector<Event> all;
    std::size_t total = 0;
    for (const auto& v : per_rank_) total += v.size();
    all.reserve(total);
    for (const auto& v : per_rank_) all.insert(all.end(), v.begin(), v.end());
    std::stable_sort(all.begin(), all.end(), [](const Event& a, const Event& b) {
      if (a.iteration != b.iteration) return a.iteration < b.iteration;
      if (a.start != b.start) return a.start < b.start;
      return a.rank < b.rank;
    });
    return all;
  }

 private:
  std::vector<std::vector<Event>> per_rank_;
};

}  // namespace freescale

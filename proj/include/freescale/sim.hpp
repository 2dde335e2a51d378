#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "freescale/comm.hpp"
#include "freescale/events.hpp"

namespace freescale::sim {

/// Logical compute/communication coefficients. Compute time for a local batch
/// is c0 + c1*sum(|uih|) + c2*sum(|uih|^2); the c2 term models attention
/// superlinearity and defaults to off.
struct CostModel {
  double c0 = 50.0;   // µs per iteration
  double c1 = 0.01;   // µs per UIH token
  double c2 = 0.0;    // µs per squared token per sample
  comm::LinkParams link{};
  double overlap_penalty = 1.10;  // fused-mode stretch on overlapped compute
  comm::CollectiveMode collective_mode = comm::CollectiveMode::Fused;

  double compute_time(std::uint64_t tokens, double sq_tokens) const {
    return c0 + c1 * static_cast<double>(tokens) + c2 * sq_tokens;
  }
  double compute_time_for_lengths(std::span<const std::uint64_t> lengths) const {
    std::uint64_t tokens = 0;
    double sq = 0;
    for (auto l : lengths) {
      tokens += l;
      sq += static_cast<double>(l) * static_cast<double>(l);
    }
    return compute_time(tokens, sq);
  }
};

struct ExposedBreakdown {
  double ids_us = 0;
  double embedding_us = 0;
  double gradient_us = 0;
  double balancer_us = 0;
  double dense_us = 0;
  double protocol_total() const { return ids_us + embedding_us + gradient_us + balancer_us; }
};

/// Completed run trace: the event log plus aligned iteration boundaries
/// (every iteration ends at a synchronizing collective, so all ranks share
/// the boundary instants).
class Timeline {
 public:
  Timeline(EventLog log, std::vector<double> boundaries);

  int num_ranks() const { return log_.num_ranks(); }
  int num_iterations() const { return static_cast<int>(boundaries_.size()) - 1; }
  const EventLog& events() const { return log_; }
  const std::vector<double>& boundaries() const { return boundaries_; }

  double iteration_duration(int i) const;
  double total_duration() const { return boundaries_.back() - boundaries_.front(); }

  /// Mean over ranks of idle fraction: (duration - main-lane compute) / duration.
  double straggler_pct(int i) const;
  double mean_straggler_pct() const;

  /// Main-lane communication time with no concurrent compute (blocking
  /// collectives and waits on overlapped handles), by category.
  ExposedBreakdown exposed_comm(int i) const;
  ExposedBreakdown exposed_comm_total() const;

  /// No event may start before its rank's previous event on the same channel
  /// ends. Throws on violation; property tests call this.
  void check_causality() const;

 private:
  EventLog log_;
  std::vector<double> boundaries_;
  std::vector<std::vector<double>> busy_;  // [iter][rank] main compute µs
  std::vector<std::vector<ExposedBreakdown>> exposed_;
};

/// Items per second from a logical duration in µs.
double qps(std::uint64_t samples_processed, double duration_us);

/// Per-iteration metric record; the single source of truth for every number
/// the CLI reports.
struct MetricRecord {
  int iteration = 0;
  int rank_count = 0;
  int batch_size = 0;
  std::uint64_t max_uih = 0;
  std::string mode;
  double sparsity = 0;
  double straggler_pct = 0;
  double collision_pct = 0;
  double exposed_ids_us = 0;
  double exposed_emb_us = 0;
  double exposed_grad_us = 0;
  double exposed_balancer_us = 0;
  double iteration_us = 0;
  double qps = 0;
};

std::string metric_csv_header();
std::string metric_csv_row(const MetricRecord& r);
std::string metric_json_line(const MetricRecord& r);

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
};

LinearFit linear_fit(std::span<const double> xs, std::span<const double> ys);

}  // namespace freescale::sim

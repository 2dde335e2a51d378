#include "freescale/partition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace freescale::partition {

namespace {

// Descending uih_len, ties broken by (origin_rank, local_index) so the order
// is identical on every rank and platform.
std::vector<std::size_t> sorted_indices(std::span<const GlobalSampleMeta> metas) {
  std::vector<std::size_t> idx(metas.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (metas[a].uih_len != metas[b].uih_len) return metas[a].uih_len > metas[b].uih_len;
    if (metas[a].origin_rank != metas[b].origin_rank)
      return metas[a].origin_rank < metas[b].origin_rank;
    return metas[a].local_index < metas[b].local_index;
  });
  return idx;
}

PartitionPlan plan_from_receive_order(std::size_t num_samples,
                                      std::vector<std::vector<std::size_t>> order) {
  PartitionPlan plan;
  plan.num_ranks = static_cast<int>(order.size());
  plan.assignment.assign(num_samples, -1);
  for (int r = 0; r < plan.num_ranks; ++r) {
    for (std::size_t g : order[static_cast<std::size_t>(r)]) plan.assignment[g] = r;
  }
  plan.receive_order = std::move(order);
  return plan;
}

// Contiguous cut of `sorted` into segments of the given sizes, segment k to
// rank k.
PartitionPlan plan_from_segment_sizes(const std::vector<std::size_t>& sorted,
                                      const std::vector<int>& sizes) {
  std::vector<std::vector<std::size_t>> order(sizes.size());
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    order[k].assign(sorted.begin() + static_cast<std::ptrdiff_t>(cursor),
                    sorted.begin() + static_cast<std::ptrdiff_t>(cursor + sizes[k]));
    cursor += static_cast<std::size_t>(sizes[k]);
  }
  return plan_from_receive_order(sorted.size(), std::move(order));
}

// Exact DP for the min-max contiguous partition on the sorted weights.
// dp[j][k] = best over first j items in k segments; the inner scan walks the
// split point down and stops once the trailing segment alone exceeds the
// best cost seen, which is valid because dp[x][k-1] is nondecreasing in x.
std::vector<int> min_max_segment_sizes(const std::vector<double>& weights, int n) {
  const std::size_t m = weights.size();
  std::vector<double> prefix(m + 1, 0.0);
  for (std::size_t i = 0; i < m; ++i) prefix[i + 1] = prefix[i] + weights[i];

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> dp(m + 1, std::vector<double>(static_cast<std::size_t>(n) + 1, inf));
  std::vector<std::vector<std::size_t>> cut(m + 1, std::vector<std::size_t>(static_cast<std::size_t>(n) + 1, 0));
  for (std::size_t j = 1; j <= m; ++j) dp[j][1] = prefix[j];
  for (int k = 2; k <= n; ++k) {
    for (std::size_t j = static_cast<std::size_t>(k); j <= m; ++j) {
      double best = inf;
      std::size_t best_x = j - 1;
      for (std::size_t x = j - 1; x + 1 >= static_cast<std::size_t>(k); --x) {
        const double seg = prefix[j] - prefix[x];
        if (seg >= best) break;
        const double cost = std::max(dp[x][static_cast<std::size_t>(k) - 1], seg);
        if (cost < best) {
          best = cost;
          best_x = x;
        }
        if (x == 0) break;
      }
      dp[j][static_cast<std::size_t>(k)] = best;
      cut[j][static_cast<std::size_t>(k)] = best_x;
    }
  }

  std::vector<int> sizes(static_cast<std::size_t>(n));
  std::size_t j = m;
  for (int k = n; k >= 1; --k) {
    std::size_t x = k == 1 ? 0 : cut[j][static_cast<std::size_t>(k)];
    sizes[static_cast<std::size_t>(k - 1)] = static_cast<int>(j - x);
    j = x;
  }
  return sizes;
}

}  // namespace

std::vector<std::vector<std::vector<int>>> PartitionPlan::exchange_lists(
    std::span<const GlobalSampleMeta> metas) const {
  std::vector<std::vector<std::vector<int>>> lists(
      static_cast<std::size_t>(num_ranks),
      std::vector<std::vector<int>>(static_cast<std::size_t>(num_ranks)));
  for (int dst = 0; dst < num_ranks; ++dst) {
    for (std::size_t g : receive_order[static_cast<std::size_t>(dst)]) {
      const auto& meta = metas[g];
      lists[static_cast<std::size_t>(meta.origin_rank)][static_cast<std::size_t>(dst)].push_back(
          meta.local_index);
    }
  }
  return lists;
}

void PartitionPlan::validate(std::size_t num_samples, bool fixed_batch) const {
  if (num_ranks < 1) throw std::invalid_argument("partition plan: num_ranks < 1");
  if (assignment.size() != num_samples) {
    throw std::invalid_argument("partition plan: assignment covers " +
                                std::to_string(assignment.size()) + " samples, expected " +
                                std::to_string(num_samples) + " (samples lost or duplicated)");
  }
  if (receive_order.size() != static_cast<std::size_t>(num_ranks)) {
    throw std::invalid_argument("partition plan: receive_order must have one list per rank");
  }
  std::vector<int> seen(num_samples, 0);
  for (int r = 0; r < num_ranks; ++r) {
    for (std::size_t g : receive_order[static_cast<std::size_t>(r)]) {
      if (g >= num_samples) {
        throw std::invalid_argument("partition plan: sample index " + std::to_string(g) +
                                    " out of range");
      }
      if (assignment[g] != r) {
        throw std::invalid_argument("partition plan: sample " + std::to_string(g) +
                                    " listed under rank " + std::to_string(r) +
                                    " but assigned to rank " + std::to_string(assignment[g]));
      }
      if (++seen[g] > 1) {
        throw std::invalid_argument("partition plan: sample " + std::to_string(g) +
                                    " assigned more than once");
      }
    }
  }
  for (std::size_t g = 0; g < num_samples; ++g) {
    if (seen[g] == 0) {
      throw std::invalid_argument("partition plan: sample " + std::to_string(g) +
                                  " not assigned to any rank");
    }
  }
  if (fixed_batch && num_samples % static_cast<std::size_t>(num_ranks) == 0) {
    const std::size_t per_rank = num_samples / static_cast<std::size_t>(num_ranks);
    for (int r = 0; r < num_ranks; ++r) {
      if (receive_order[static_cast<std::size_t>(r)].size() != per_rank) {
        throw std::invalid_argument("partition plan: rank " + std::to_string(r) + " receives " +
                                    std::to_string(receive_order[static_cast<std::size_t>(r)].size()) +
                                    " samples, expected " + std::to_string(per_rank));
      }
    }
  }
}

PartitionPlan fbs_partition(std::span<const GlobalSampleMeta> metas, int num_ranks) {
  if (num_ranks < 1) throw std::invalid_argument("fbs: num_ranks must be >= 1");
  if (metas.size() % static_cast<std::size_t>(num_ranks) != 0) {
    throw std::invalid_argument("fbs: " + std::to_string(metas.size()) +
                                " samples not divisible by " + std::to_string(num_ranks) +
                                " ranks");
  }
  const auto sorted = sorted_indices(metas);
  std::vector<std::vector<std::size_t>> order(static_cast<std::size_t>(num_ranks));
  const std::size_t per_rank = metas.size() / static_cast<std::size_t>(num_ranks);
  for (auto& o : order) o.reserve(per_rank);
  const auto n = static_cast<std::size_t>(num_ranks);
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    const std::size_t pass = k / n;
    const std::size_t pos = k % n;
    const std::size_t rank = (pass % 2 == 0) ? pos : n - 1 - pos;  // snake
    order[rank].push_back(sorted[k]);
  }
  return plan_from_receive_order(metas.size(), std::move(order));
}

PartitionPlan vbs_partition(std::span<const GlobalSampleMeta> metas, int num_ranks, double alpha,
                            AutoTuneState* tune) {
  if (alpha <= 0) throw std::invalid_argument("vbs: alpha must be > 0");
  if (metas.empty()) throw std::invalid_argument("vbs: no samples");
  if (static_cast<std::size_t>(num_ranks) > metas.size()) {
    throw std::invalid_argument("vbs: " + std::to_string(num_ranks) + " ranks but only " +
                                std::to_string(metas.size()) +
                                " samples (cannot give every rank one)");
  }
  const auto sorted = sorted_indices(metas);

  if (tune != nullptr && tune->initialized &&
      std::accumulate(tune->local_batch_size.begin(), tune->local_batch_size.end(), std::size_t{0},
                      [](std::size_t a, int b) { return a + static_cast<std::size_t>(b); }) ==
          metas.size() &&
      tune->local_batch_size.size() == static_cast<std::size_t>(num_ranks)) {
    return plan_from_segment_sizes(sorted, tune->local_batch_size);
  }

  std::vector<double> weights(sorted.size());
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    weights[k] = std::pow(static_cast<double>(metas[sorted[k]].uih_len), alpha);
  }
  const auto sizes = min_max_segment_sizes(weights, num_ranks);
  if (tune != nullptr) {
    tune->local_batch_size = sizes;
    tune->ema_local.assign(static_cast<std::size_t>(num_ranks), 0.0);
    tune->ema_global = 0.0;
    tune->initialized = true;
  }
  return plan_from_segment_sizes(sorted, sizes);
}

void autotune_update(AutoTuneState& tune, std::span<const double> local_times) {
  if (!tune.initialized) throw ProtocolError("autotune: state not initialized");
  const auto n = tune.local_batch_size.size();
  if (local_times.size() != n) {
    throw std::invalid_argument("autotune: expected " + std::to_string(n) + " times, got " +
                                std::to_string(local_times.size()));
  }
  double mean = 0;
  for (double t : local_times) {
    if (t <= 0) throw std::invalid_argument("autotune: execution times must be > 0");
    mean += t;
  }
  mean /= static_cast<double>(n);

  const bool first = tune.ema_global == 0.0;
  tune.ema_global = first ? mean : tune.decay * tune.ema_global + (1 - tune.decay) * mean;
  for (std::size_t r = 0; r < n; ++r) {
    tune.ema_local[r] = first ? local_times[r]
                              : tune.decay * tune.ema_local[r] + (1 - tune.decay) * local_times[r];
  }

  const int total = std::accumulate(tune.local_batch_size.begin(), tune.local_batch_size.end(), 0);
  std::vector<int> desired = tune.local_batch_size;
  for (std::size_t r = 0; r < n; ++r) {
    if (tune.ema_local[r] > (1 + tune.delta) * tune.ema_global) {
      desired[r] = std::max(1, desired[r] - tune.step);
    } else if (tune.ema_local[r] < (1 - tune.delta) * tune.ema_global) {
      desired[r] += tune.step;
    }
  }

  // Conserve the global total: the largest holder donates, the smallest
  // receives, with EMA then rank id as deterministic tie-breakers.
  int diff = std::accumulate(desired.begin(), desired.end(), 0) - total;
  while (diff > 0) {
    std::size_t donor = 0;
    for (std::size_t r = 1; r < n; ++r) {
      if (desired[r] > desired[donor] ||
          (desired[r] == desired[donor] && tune.ema_local[r] > tune.ema_local[donor])) {
        donor = r;
      }
    }
    if (desired[donor] <= 1) break;  // everyone clamped; accept the drift
    --desired[donor];
    --diff;
  }
  while (diff < 0) {
    std::size_t receiver = 0;
    for (std::size_t r = 1; r < n; ++r) {
      if (desired[r] < desired[receiver] ||
          (desired[r] == desired[receiver] && tune.ema_local[r] < tune.ema_local[receiver])) {
        receiver = r;
      }
    }
    ++desired[receiver];
    ++diff;
  }
  tune.local_batch_size = std::move(desired);
}

PartitionPlan identity_partition(std::span<const GlobalSampleMeta> metas, int num_ranks) {
  std::vector<std::vector<std::size_t>> order(static_cast<std::size_t>(num_ranks));
  for (std::size_t g = 0; g < metas.size(); ++g) {
    order[static_cast<std::size_t>(metas[g].origin_rank)].push_back(g);
  }
  // origin order == local_index order
  for (auto& o : order) {
    std::sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) {
      return metas[a].local_index < metas[b].local_index;
    });
  }
  return plan_from_receive_order(metas.size(), std::move(order));
}

PartitionPlan custom_partition(const PartitionFn& fn, std::span<const GlobalSampleMeta> metas,
                               int num_ranks) {
  PartitionPlan plan = fn(metas, num_ranks);
  plan.validate(metas.size(), /*fixed_batch=*/false);
  return plan;
}

double min_max_contiguous_bruteforce(std::span<const double> weights, int segments) {
  const std::size_t m = weights.size();
  std::vector<double> prefix(m + 1, 0.0);
  for (std::size_t i = 0; i < m; ++i) prefix[i + 1] = prefix[i] + weights[i];
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> cuts(static_cast<std::size_t>(segments) - 1);
  // enumerate all strictly increasing cut tuples in (0, m)
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t k, std::size_t lo) {
    if (k == cuts.size()) {
      double mx = 0;
      std::size_t prev = 0;
      for (std::size_t c : cuts) {
        mx = std::max(mx, prefix[c] - prefix[prev]);
        prev = c;
      }
      mx = std::max(mx, prefix[m] - prefix[prev]);
      best = std::min(best, mx);
      return;
    }
    for (std::size_t c = lo; c + (cuts.size() - k) <= m; ++c) {
      cuts[k] = c;
      rec(k + 1, c + 1);
    }
  };
  if (segments == 1) return prefix[m];
  rec(0, 1);
  return best;
}

double plan_max_weight(const PartitionPlan& plan, std::span<const GlobalSampleMeta> metas,
                       double alpha) {
  double mx = 0;
  for (const auto& order : plan.receive_order) {
    double w = 0;
    for (std::size_t g : order) w += std::pow(static_cast<double>(metas[g].uih_len), alpha);
    mx = std::max(mx, w);
  }
  return mx;
}

}  // namespace freescale::partition

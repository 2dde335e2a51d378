#include "freescale/sim.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"

namespace freescale::sim {

Timeline::Timeline(EventLog log, std::vector<double> boundaries)
    : log_(std::move(log)), boundaries_(std::move(boundaries)) {
  if (boundaries_.size() < 1) throw std::invalid_argument("timeline: missing boundaries");
  const int iters = num_iterations();
  const int ranks = log_.num_ranks();
  busy_.assign(static_cast<std::size_t>(iters), std::vector<double>(static_cast<std::size_t>(ranks), 0.0));
  exposed_.assign(static_cast<std::size_t>(iters),
                  std::vector<ExposedBreakdown>(static_cast<std::size_t>(ranks)));
  for (int r = 0; r < ranks; ++r) {
    for (const Event& e : log_.rank_events(r)) {
      if (e.iteration < 0 || e.iteration >= iters) continue;
      auto& exp = exposed_[static_cast<std::size_t>(e.iteration)][static_cast<std::size_t>(r)];
      const double d = e.end - e.start;
      if (e.channel == Channel::Main && e.kind == EventKind::Compute) {
        busy_[static_cast<std::size_t>(e.iteration)][static_cast<std::size_t>(r)] += d;
      } else if (e.channel == Channel::Main &&
                 (e.kind == EventKind::Collective || e.kind == EventKind::Wait)) {
        switch (e.category) {
          case Category::Ids: exp.ids_us += d; break;
          case Category::Embedding: exp.embedding_us += d; break;
          case Category::Gradient: exp.gradient_us += d; break;
          case Category::Balancer: exp.balancer_us += d; break;
          case Category::Dense: exp.dense_us += d; break;
          case Category::None: break;
        }
      }
    }
  }
}

double Timeline::iteration_duration(int i) const {
  return boundaries_.at(static_cast<std::size_t>(i) + 1) - boundaries_.at(static_cast<std::size_t>(i));
}

double Timeline::straggler_pct(int i) const {
  const double duration = iteration_duration(i);
  if (duration <= 0) throw std::invalid_argument("straggler_pct: zero-duration iteration");
  const int ranks = num_ranks();
  if (ranks == 0) throw std::invalid_argument("straggler_pct: no ranks");
  double idle = 0;
  for (int r = 0; r < ranks; ++r) {
    idle += std::max(0.0, duration - busy_[static_cast<std::size_t>(i)][static_cast<std::size_t>(r)]);
  }
  return idle / (duration * static_cast<double>(ranks));
}

double Timeline::mean_straggler_pct() const {
  const int iters = num_iterations();
  if (iters == 0) return 0;
  double total = 0;
  for (int i = 0; i < iters; ++i) total += straggler_pct(i);
  return total / iters;
}

ExposedBreakdown Timeline::exposed_comm(int i) const {
  ExposedBreakdown out;
  for (const auto& per_rank : exposed_.at(static_cast<std::size_t>(i))) {
    out.ids_us += per_rank.ids_us;
    out.embedding_us += per_rank.embedding_us;
    out.gradient_us += per_rank.gradient_us;
    out.balancer_us += per_rank.balancer_us;
    out.dense_us += per_rank.dense_us;
  }
  return out;
}

ExposedBreakdown Timeline::exposed_comm_total() const {
  ExposedBreakdown out;
  for (int i = 0; i < num_iterations(); ++i) {
    const ExposedBreakdown e = exposed_comm(i);
    out.ids_us += e.ids_us;
    out.embedding_us += e.embedding_us;
    out.gradient_us += e.gradient_us;
    out.balancer_us += e.balancer_us;
    out.dense_us += e.dense_us;
  }
  return out;
}

void Timeline::check_causality() const {
  for (int r = 0; r < num_ranks(); ++r) {
    double last_main = -1, last_side = -1;
    for (const Event& e : log_.rank_events(r)) {
      if (e.end < e.start) {
        throw std::logic_error("timeline: event ends before it starts on rank " + std::to_string(r));
      }
      double& last = e.channel == Channel::Main ? last_main : last_side;
      if (e.start + 1e-9 < last) {
        throw std::logic_error("timeline: overlapping events on one channel of rank " +
                               std::to_string(r));
      }
      last = e.end;
    }
  }
}

double qps(std::uint64_t samples_processed, double duration_us) {
  if (duration_us <= 0) throw std::invalid_argument("qps: duration must be > 0");
  return static_cast<double>(samples_processed) / duration_us * 1e6;
}

std::string metric_csv_header() {
  return "iteration,rank_count,batch_size,max_uih,mode,sparsity,straggler_pct,collision_pct,"
         "exposed_ids_us,exposed_emb_us,exposed_grad_us,exposed_balancer_us,iteration_us,qps";
}

namespace {
std::string fmt(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}
}  // namespace

std::string metric_csv_row(const MetricRecord& r) {
  std::ostringstream os;
  os << r.iteration << ',' << r.rank_count << ',' << r.batch_size << ',' << r.max_uih << ','
     << r.mode << ',' << fmt(r.sparsity) << ',' << fmt(r.straggler_pct) << ','
     << fmt(r.collision_pct) << ',' << fmt(r.exposed_ids_us) << ',' << fmt(r.exposed_emb_us) << ','
     << fmt(r.exposed_grad_us) << ',' << fmt(r.exposed_balancer_us) << ',' << fmt(r.iteration_us)
     << ',' << fmt(r.qps);
  return os.str();
}

std::string metric_json_line(const MetricRecord& r) {
  nlohmann::json j;
  j["iteration"] = r.iteration;
  j["rank_count"] = r.rank_count;
  j["batch_size"] = r.batch_size;
  j["max_uih"] = r.max_uih;
  j["mode"] = r.mode;
  j["sparsity"] = r.sparsity;
  j["straggler_pct"] = r.straggler_pct;
  j["collision_pct"] = r.collision_pct;
  j["exposed_ids_us"] = r.exposed_ids_us;
  j["exposed_emb_us"] = r.exposed_emb_us;
  j["exposed_grad_us"] = r.exposed_grad_us;
  j["exposed_balancer_us"] = r.exposed_balancer_us;
  j["iteration_us"] = r.iteration_us;
  j["qps"] = r.qps;
  return j.dump();
}

LinearFit linear_fit(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw std::invalid_argument("linear_fit: need >= 2 paired points");
  }
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
    syy += ys[i] * ys[i];
  }
  LinearFit fit;
  const double denom = n * sxx - sx * sx;
  fit.slope = denom != 0 ? (n * sxy - sx * sy) / denom : 0.0;
  fit.intercept = (sy - fit.slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  const double mean_y = sy / n;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double pred = fit.slope * xs[i] + fit.intercept;
    ss_res += (ys[i] - pred) * (ys[i] - pred);
    ss_tot += (ys[i] - mean_y) * (ys[i] - mean_y);
  }
  fit.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

}  // namespace freescale::sim

// freescale: deterministic multi-rank training simulator for sequence
// recommendation workloads. Subcommands: gen, run, bench, parity.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "freescale/config.hpp"
#include "freescale/experiments.hpp"
#include "freescale/pipeline.hpp"
#include "freescale/workload.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace freescale;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitParity = 3;

const std::vector<std::string> kKnownKeys = {
    // workload
    "ranks", "batch_size", "max_uih", "iterations", "dist", "mu", "sigma", "lo", "hi", "hist",
    "collision", "table_rows", "seed", "workload_file",
    // run
    "mode", "collective", "out_dir", "max_runs", "check_parity", "gnuplot",
    // balancer + partitioning
    "balancer.enabled", "balancer.prefetch_depth", "balancer.partition", "partition", "alpha",
    "delta", "step",
    // simulated link
    "latency_us", "bandwidth_gbps", "copy_cost_us_per_mb", "overlap_penalty",
    // compute cost model
    "c0", "c1", "c2",
    // model
    "dim", "lr_embedding", "lr_dense",
    // sweeps
    "sweep_max_uih", "sweep_batch_size", "sweep_ranks", "sweep_collision"};

std::uint64_t env_seed_fallback() {
  const char* env = std::getenv("FREESCALE_SEED");
  if (env == nullptr) return 0;
  try {
    return static_cast<std::uint64_t>(std::stoull(env));
  } catch (const std::exception&) {
    throw ConfigError("FREESCALE_SEED is not an integer");
  }
}

workload::WorkloadSpec spec_from_config(const config::KeyValues& kv) {
  workload::WorkloadSpec spec;
  spec.num_ranks = static_cast<int>(kv.get_i64("ranks", 8));
  spec.batch_size = static_cast<int>(kv.get_i64("batch_size", 32));
  spec.max_uih = static_cast<std::uint64_t>(kv.get_i64("max_uih", 2048));
  spec.num_iterations = static_cast<int>(kv.get_i64("iterations", 20));
  spec.table_rows = static_cast<std::uint64_t>(kv.get_i64("table_rows", 1 << 16));
  spec.seed = static_cast<std::uint64_t>(kv.get_i64("seed", static_cast<std::int64_t>(env_seed_fallback())));
  const std::string dist = kv.get_str("dist", "lognormal");
  if (dist == "lognormal") {
    spec.dist = workload::DistSpec::log_normal(kv.get_f64("mu", 7.0), kv.get_f64("sigma", 1.2));
  } else if (dist == "uniform") {
    spec.dist = workload::DistSpec::uniform(static_cast<std::uint64_t>(kv.get_i64("lo", 1)),
                                            static_cast<std::uint64_t>(kv.get_i64("hi", 256)));
  } else if (dist == "empirical") {
    auto hist = kv.get_list("hist");
    if (hist.empty()) throw ConfigError("dist = empirical requires hist = w0,w1,...");
    spec.dist = workload::DistSpec::empirical(std::move(hist));
  } else {
    throw ConfigError("unknown distribution '" + dist + "' (lognormal|uniform|empirical)");
  }
  if (kv.has("collision")) spec.target_collision = kv.get_f64("collision", 0.0);
  spec.validate();
  return spec;
}

pipeline::RunConfig run_config_from(const config::KeyValues& kv) {
  pipeline::RunConfig cfg;
  const std::string mode = kv.get_str("mode", "synchronized");
  if (mode == "synchronized") {
    cfg.mode = pipeline::Mode::Synchronized;
  } else if (mode == "prioritized") {
    cfg.mode = pipeline::Mode::Prioritized;
  } else {
    throw ConfigError("unknown mode '" + mode + "' (synchronized|prioritized)");
  }
  const std::string coll = kv.get_str("collective", "fused");
  if (coll == "fused") {
    cfg.cost.collective_mode = comm::CollectiveMode::Fused;
  } else if (coll == "sm_free") {
    cfg.cost.collective_mode = comm::CollectiveMode::SmFree;
  } else {
    throw ConfigError("unknown collective '" + coll + "' (fused|sm_free)");
  }
  cfg.balancer_enabled = kv.get_bool("balancer.enabled", false);
  cfg.prefetch_depth = static_cast<int>(kv.get_i64("balancer.prefetch_depth", 1));
  cfg.partition = kv.get_str("balancer.partition", kv.get_str("partition", "fbs"));
  cfg.alpha = kv.get_f64("alpha", 1.0);
  cfg.autotune_delta = kv.get_f64("delta", 0.05);
  cfg.autotune_step = static_cast<int>(kv.get_i64("step", 1));
  cfg.cost.c0 = kv.get_f64("c0", 50.0);
  cfg.cost.c1 = kv.get_f64("c1", 0.01);
  cfg.cost.c2 = kv.get_f64("c2", 0.0);
  cfg.cost.link.latency_us = kv.get_f64("latency_us", 5.0);
  cfg.cost.link.bandwidth_bytes_per_us = kv.get_f64("bandwidth_gbps", 25.0) * 1000.0;
  cfg.cost.link.copy_cost_us_per_mb = kv.get_f64("copy_cost_us_per_mb", 40.0);
  cfg.cost.overlap_penalty = kv.get_f64("overlap_penalty", 1.10);
  cfg.table_rows = static_cast<std::uint64_t>(kv.get_i64("table_rows", 1 << 16));
  cfg.dim = static_cast<std::uint32_t>(kv.get_i64("dim", 8));
  cfg.lr_embedding = kv.get_f64("lr_embedding", 0.05);
  cfg.lr_dense = kv.get_f64("lr_dense", 0.05);
  cfg.model_seed = static_cast<std::uint64_t>(kv.get_i64("seed", static_cast<std::int64_t>(env_seed_fallback())));
  return cfg;
}

void write_outputs(const fs::path& dir, const std::string& name,
                   const std::map<std::string, std::string>& used,
                   const std::vector<sim::MetricRecord>& records, bool gnuplot) {
  fs::create_directories(dir);
  // schema v1: straggler busy time counts main-lane compute only
  {
    std::ofstream csv(dir / (name + ".csv"), std::ios::trunc);
    csv << "# freescale metrics, schema = 1 (straggler busy = main-lane compute)\n";
    for (const auto& [k, v] : used) csv << "# " << k << " = " << v << "\n";
    csv << sim::metric_csv_header() << "\n";
    for (const auto& r : records) csv << sim::metric_csv_row(r) << "\n";
  }
  {
    std::ofstream jsonl(dir / (name + ".jsonl"), std::ios::trunc);
    nlohmann::json cfg;
    for (const auto& [k, v] : used) cfg[k] = v;
    jsonl << nlohmann::json{{"schema", 1}, {"config", cfg}}.dump() << "\n";
    for (const auto& r : records) jsonl << sim::metric_json_line(r) << "\n";
  }
  if (gnuplot) {
    std::ofstream dat(dir / (name + ".dat"), std::ios::trunc);
    dat << "# iteration straggler_pct collision_pct exposed_total_us iteration_us qps\n";
    for (const auto& r : records) {
      dat << r.iteration << ' ' << r.straggler_pct << ' ' << r.collision_pct << ' '
          << (r.exposed_ids_us + r.exposed_emb_us + r.exposed_grad_us + r.exposed_balancer_us)
          << ' ' << r.iteration_us << ' ' << r.qps << "\n";
    }
  }
}

void print_summary(const std::string& name, const std::vector<sim::MetricRecord>& records) {
  if (records.empty()) {
    std::cout << name << ": no iterations\n";
    return;
  }
  double straggler = 0, exposed = 0, total_us = 0, qps = 0, collision = 0;
  for (const auto& r : records) {
    straggler += r.straggler_pct;
    exposed += r.exposed_ids_us + r.exposed_emb_us + r.exposed_grad_us + r.exposed_balancer_us;
    total_us += r.iteration_us;
    qps += r.qps;
    collision += r.collision_pct;
  }
  const double n = static_cast<double>(records.size());
  std::cout << name << ": iterations=" << records.size() << " mean_straggler_pct=" << straggler / n
            << " mean_collision_pct=" << collision / n << " exposed_total_us=" << exposed
            << " total_us=" << total_us << " mean_qps=" << qps / n << "\n";
}

std::map<std::string, std::string> used_config(const config::KeyValues& kv,
                                               const workload::WorkloadSpec& spec,
                                               const std::string& mode) {
  std::map<std::string, std::string> used = kv.entries();
  used.erase("out_dir");  // keep output bytes independent of where they land
  used.erase("workload_file");
  used["ranks"] = std::to_string(spec.num_ranks);
  used["batch_size"] = std::to_string(spec.batch_size);
  used["max_uih"] = std::to_string(spec.max_uih);
  used["iterations"] = std::to_string(spec.num_iterations);
  used["seed"] = std::to_string(spec.seed);
  if (spec.target_collision) used["collision"] = std::to_string(*spec.target_collision);
  used["mode"] = mode;
  return used;
}

int cmd_gen(const config::KeyValues& kv, const std::string& out_path) {
  auto spec = spec_from_config(kv);
  workload::Generator gen(spec);
  workload::Writer writer(out_path, spec);
  std::vector<std::uint64_t> prev;
  double collision_sum = 0;
  int measured = 0;
  bool first = true;
  std::uint64_t tokens = 0;
  while (gen.has_next()) {
    auto batches = gen.next_iteration();
    for (const auto& b : batches) tokens += b.total_uih_tokens();
    auto unique = workload::unique_rows(batches);
    if (!first && !unique.empty() && !prev.empty()) {
      collision_sum += workload::collision_fraction(prev, unique);
      ++measured;
    }
    first = false;
    prev = std::move(unique);
    writer.write_iteration(batches);
  }
  writer.close();
  std::cout << "wrote " << out_path << ": ranks=" << spec.num_ranks
            << " batch=" << spec.batch_size << " iterations=" << spec.num_iterations
            << " uih_tokens=" << tokens;
  if (measured > 0) std::cout << " measured_collision=" << collision_sum / measured;
  std::cout << "\n";
  return kExitOk;
}

int cmd_run(config::KeyValues kv, bool check_parity_flag, bool gnuplot_flag) {
  const bool check_parity = check_parity_flag || kv.get_bool("check_parity", false);
  const bool gnuplot = gnuplot_flag || kv.get_bool("gnuplot", false);
  const fs::path out_dir = kv.get_str("out_dir", "out");
  const auto max_runs = kv.get_i64("max_runs", 64);

  // sweep axes; empty axis = single point from the base config
  const auto ax_uih = kv.get_list("sweep_max_uih");
  const auto ax_batch = kv.get_list("sweep_batch_size");
  const auto ax_ranks = kv.get_list("sweep_ranks");
  const auto ax_coll = kv.get_list("sweep_collision");
  auto axis = [](const std::vector<double>& v) { return v.empty() ? std::size_t{1} : v.size(); };
  const std::size_t total = axis(ax_uih) * axis(ax_batch) * axis(ax_ranks) * axis(ax_coll);
  if (total > static_cast<std::size_t>(max_runs)) {
    throw ConfigError("sweep would launch " + std::to_string(total) + " runs, max_runs is " +
                      std::to_string(max_runs));
  }

  int run_index = 0;
  bool parity_failed = false;
  for (std::size_t iu = 0; iu < axis(ax_uih); ++iu) {
    for (std::size_t ib = 0; ib < axis(ax_batch); ++ib) {
      for (std::size_t ir = 0; ir < axis(ax_ranks); ++ir) {
        for (std::size_t ic = 0; ic < axis(ax_coll); ++ic) {
          config::KeyValues point = kv;
          if (!ax_uih.empty()) point.set("max_uih", std::to_string(static_cast<std::uint64_t>(ax_uih[iu])));
          if (!ax_batch.empty()) point.set("batch_size", std::to_string(static_cast<int>(ax_batch[ib])));
          if (!ax_ranks.empty()) point.set("ranks", std::to_string(static_cast<int>(ax_ranks[ir])));
          if (!ax_coll.empty()) point.set("collision", std::to_string(ax_coll[ic]));

          workload::WorkloadSpec spec;
          std::vector<std::vector<workload::Batch>> iterations;
          const std::string wfile = point.get_str("workload_file", "");
          if (!wfile.empty()) {
            auto loaded = workload::load_workload(wfile);
            spec = loaded.first;
            iterations = std::move(loaded.second);
          } else {
            spec = spec_from_config(point);
            iterations = workload::generate_all(spec);
          }
          auto cfg = run_config_from(point);
          cfg.table_rows = std::max<std::uint64_t>(cfg.table_rows, spec.table_rows);

          const std::string base = "run_" + std::to_string(run_index);
          auto result = pipeline::run(iterations, spec, cfg);
          write_outputs(out_dir, base + "_" + pipeline::mode_name(cfg.mode),
                        used_config(point, spec, pipeline::mode_name(cfg.mode)), result.records,
                        gnuplot);
          print_summary(base + "_" + std::string(pipeline::mode_name(cfg.mode)), result.records);

          if (check_parity) {
            auto other_cfg = cfg;
            other_cfg.mode = cfg.mode == pipeline::Mode::Synchronized
                                 ? pipeline::Mode::Prioritized
                                 : pipeline::Mode::Synchronized;
            auto other = pipeline::run(iterations, spec, other_cfg);
            write_outputs(out_dir, base + "_" + pipeline::mode_name(other_cfg.mode),
                          used_config(point, spec, pipeline::mode_name(other_cfg.mode)),
                          other.records, gnuplot);
            const bool same = other.full_checkpoint == result.full_checkpoint;
            std::cout << base << " parity: " << (same ? "IDENTICAL" : "DIVERGED") << "\n";
            if (!same) parity_failed = true;
          }
          ++run_index;
        }
      }
    }
  }
  return parity_failed ? kExitParity : kExitOk;
}

int cmd_parity(config::KeyValues kv) {
  auto spec = spec_from_config(kv);
  auto iterations = workload::generate_all(spec);
  auto cfg = run_config_from(kv);
  cfg.table_rows = std::max<std::uint64_t>(cfg.table_rows, spec.table_rows);

  cfg.mode = pipeline::Mode::Synchronized;
  auto sync = pipeline::run(iterations, spec, cfg);
  cfg.mode = pipeline::Mode::Prioritized;
  auto prio = pipeline::run(iterations, spec, cfg);
  const bool same = sync.full_checkpoint == prio.full_checkpoint;
  std::cout << "parity: " << (same ? "IDENTICAL" : "DIVERGED") << " (" << spec.num_ranks
            << " ranks, " << spec.num_iterations << " iterations, "
            << sync.full_checkpoint.size() << " checkpoint bytes)\n";
  return same ? kExitOk : kExitParity;
}

int cmd_bench(const std::string& collective, const std::vector<std::size_t>& sizes, int ranks,
              const config::KeyValues& kv) {
  comm::LinkParams link;
  link.latency_us = kv.get_f64("latency_us", 5.0);
  link.bandwidth_bytes_per_us = kv.get_f64("bandwidth_gbps", 25.0) * 1000.0;
  link.copy_cost_us_per_mb = kv.get_f64("copy_cost_us_per_mb", 40.0);

  // correctness before timing: the ring must reproduce the reference gather
  {
    comm::InProcessFabric fabric(ranks, link);
    std::vector<bool> ok(static_cast<std::size_t>(ranks), false);
    fabric.run([&](int rank) {
      comm::Communicator comm(fabric.transport(rank));
      comm::Bytes payload(129 + static_cast<std::size_t>(rank) * 7);
      for (std::size_t i = 0; i < payload.size(); ++i) {
        payload[i] = static_cast<std::uint8_t>(rank * 37 + i);
      }
      std::vector<std::uint64_t> chunk_sizes;
      for (int r = 0; r < ranks; ++r) chunk_sizes.push_back(129 + static_cast<std::size_t>(r) * 7);
      auto ring = comm.ring_all_gather(payload, chunk_sizes, {});
      auto ref = comm.all_gather(payload, {});
      ok[static_cast<std::size_t>(rank)] = ring == ref;
    });
    for (bool o : ok) {
      if (!o) throw ProtocolError("bench: ring_all_gather diverged from all_gather");
    }
  }

  std::vector<experiments::BenchPoint> points;
  if (collective == "ring") {
    points = experiments::bench_ring_all_gather(ranks, sizes, link);
  } else if (collective == "allgather") {
    points = experiments::bench_all_gather(ranks, sizes, link);
  } else if (collective == "alltoall") {
    points = experiments::bench_all_to_all(ranks, sizes, link);
  } else {
    throw ConfigError("unknown collective '" + collective + "' (ring|allgather|alltoall)");
  }
  std::cout << "# collective=" << collective << " ranks=" << ranks << "\n";
  std::cout << "# bytes fused_us sm_free_us\n";
  for (const auto& p : points) {
    std::cout << p.payload_bytes << ' ' << p.fused_us << ' ' << p.sm_free_us << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"freescale: load-balanced, collision-aware distributed training simulator"};
  app.require_subcommand(1);

  // shared flag plumbing: every flag lands in the key/value store, so config
  // file and flags resolve identically (flags win)
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  auto add_common = [&](CLI::App* cmd, bool with_out_dir = true) {
    cmd->add_option("--config", config_path, "key = value config file");
    auto opt = [&, cmd](const char* flag, const char* key, const char* help) {
      cmd->add_option_function<std::string>(
          flag, [&, key](const std::string& v) { overrides.emplace_back(key, v); }, help);
    };
    if (with_out_dir) opt("--out", "out_dir", "output directory");
    opt("--ranks", "ranks", "world size");
    opt("--batch", "batch_size", "samples per rank per iteration");
    opt("--max-uih", "max_uih", "maximum UIH length");
    opt("--iters", "iterations", "iteration count");
    opt("--seed", "seed", "workload/model seed (fallback: FREESCALE_SEED)");
    opt("--dist", "dist", "length distribution: lognormal|uniform|empirical");
    opt("--mu", "mu", "lognormal mu");
    opt("--sigma", "sigma", "lognormal sigma");
    opt("--lo", "lo", "uniform lower bound");
    opt("--hi", "hi", "uniform upper bound");
    opt("--hist", "hist", "empirical histogram weights w0,w1,...");
    opt("--collision", "collision", "target cross-iteration collision ratio");
    opt("--table-rows", "table_rows", "embedding table rows");
    opt("--dim", "dim", "embedding dimension");
    opt("--lr", "lr_embedding", "embedding learning rate");
    opt("--lr-dense", "lr_dense", "dense learning rate");
    opt("--mode", "mode", "synchronized|prioritized");
    opt("--collective", "collective", "fused|sm_free");
    opt("--balancer", "balancer.enabled", "enable the load balancer (true|false)");
    opt("--partition", "balancer.partition", "fbs|vbs|none|custom:<name>");
    opt("--alpha", "alpha", "VBS weight exponent");
    opt("--c0", "c0", "fixed compute cost, us");
    opt("--c1", "c1", "compute cost per token, us");
    opt("--c2", "c2", "compute cost per squared token, us");
    opt("--latency-us", "latency_us", "link latency, us");
    opt("--bandwidth-gbps", "bandwidth_gbps", "link bandwidth, GB/s");
    opt("--copy-cost", "copy_cost_us_per_mb", "staged copy cost, us per MB");
    opt("--overlap-penalty", "overlap_penalty", "fused-mode compute stretch factor");
    opt("--workload", "workload_file", "pre-generated workload file");
    opt("--max-runs", "max_runs", "sweep size bound");
    opt("--sweep-max-uih", "sweep_max_uih", "comma list of max_uih values");
    opt("--sweep-batch", "sweep_batch_size", "comma list of batch sizes");
    opt("--sweep-ranks", "sweep_ranks", "comma list of rank counts");
    opt("--sweep-collision", "sweep_collision", "comma list of collision ratios");
  };

  auto* gen = app.add_subcommand("gen", "generate a workload file");
  std::string gen_out = "workload.bin";
  gen->add_option("--out", gen_out, "output path");
  add_common(gen, /*with_out_dir=*/false);

  auto* runc = app.add_subcommand("run", "run experiments and emit metric records");
  bool flag_check_parity = false, flag_gnuplot = false;
  runc->add_flag("--check-parity", flag_check_parity, "also run the other mode and diff state");
  runc->add_flag("--gnuplot", flag_gnuplot, "emit plot-ready .dat files");
  add_common(runc);

  auto* parity = app.add_subcommand("parity", "run both modes and diff final state");
  add_common(parity);

  auto* bench = app.add_subcommand("bench", "collective latency table");
  std::string bench_collective = "ring";
  std::string bench_sizes = "0,1024,1048576";
  int bench_ranks = 4;
  bench->add_option("--collective", bench_collective, "ring|allgather|alltoall");
  bench->add_option("--sizes", bench_sizes, "comma list of payload sizes in bytes");
  bench->add_option("--ranks", bench_ranks, "world size");
  bench->add_option("--config", config_path, "key = value config file");
  for (auto [flag, key, help] :
       {std::tuple{"--latency-us", "latency_us", "link latency, us"},
        std::tuple{"--bandwidth-gbps", "bandwidth_gbps", "link bandwidth, GB/s"},
        std::tuple{"--copy-cost", "copy_cost_us_per_mb", "staged copy cost, us per MB"}}) {
    bench->add_option_function<std::string>(
        flag, [&overrides, key = key](const std::string& v) { overrides.emplace_back(key, v); },
        help);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    config::KeyValues kv;
    if (!config_path.empty()) kv = config::KeyValues::parse_file(config_path);
    kv.validate_keys(kKnownKeys);
    for (const auto& [key, value] : overrides) kv.set(key, value);

    if (gen->parsed()) return cmd_gen(kv, gen_out);
    if (runc->parsed()) return cmd_run(std::move(kv), flag_check_parity, flag_gnuplot);
    if (parity->parsed()) return cmd_parity(std::move(kv));
    if (bench->parsed()) {
      std::vector<std::size_t> sizes;
      config::KeyValues tmp;
      tmp.set("sizes", bench_sizes);
      for (double v : tmp.get_list("sizes")) sizes.push_back(static_cast<std::size_t>(v));
      return cmd_bench(bench_collective, sizes, bench_ranks, kv);
    }
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "freescale/errors.hpp"
#include "freescale/jagged.hpp"

namespace freescale::workload {

/// One user record: interaction-history row IDs, per-candidate ID lists and a
/// scalar label in [0,1].
struct Sample {
  std::vector<std::uint64_t> uih;
  std::vector<std::vector<std::uint64_t>> candidates;
  double label = 0.0;

  bool operator==(const Sample&) const = default;
};

struct Batch {
  std::vector<Sample> samples;
  int rank = 0;

  std::uint64_t total_uih_tokens() const;
  std::uint64_t max_uih_len() const;
  /// Batch-major ID tensor: one segment per sample, values = uih row IDs.
  IdJagged uih_ids() const;

  bool operator==(const Batch&) const = default;
};

enum class LengthDist { LogNormal, Uniform, Empirical };

struct DistSpec {
  LengthDist kind = LengthDist::LogNormal;
  // LogNormal parameters (exp of a normal draw).
  double mu = 7.0;
  double sigma = 1.2;
  // Uniform inclusive bounds.
  std::uint64_t lo = 0;
  std::uint64_t hi = 0;
  // Empirical: weight of length k at index k.
  std::vector<double> histogram;

  static DistSpec log_normal(double mu, double sigma);
  static DistSpec uniform(std::uint64_t lo, std::uint64_t hi);
  static DistSpec empirical(std::vector<double> histogram);

  bool operator==(const DistSpec&) const = default;
};

struct WorkloadSpec {
  int num_ranks = 1;
  int batch_size = 1;          // samples per rank per iteration at ingestion
  std::uint64_t max_uih = 1024;
  DistSpec dist;
  std::uint64_t table_rows = 1 << 16;
  std::optional<double> target_collision = std::nullopt;  // in [0,1]
  std::uint64_t seed = 0;
  int num_iterations = 1;

  void validate() const;
  bool operator==(const WorkloadSpec&) const = default;
};

/// Deterministic synthetic workload stream. Batches for iteration i are
/// produced together for all ranks; the collision-control pool carries state
/// across iterations, so iterations must be consumed in order.
class Generator {
 public:
  explicit Generator(WorkloadSpec spec);

  const WorkloadSpec& spec() const { return spec_; }
  bool has_next() const { return iteration_ < spec_.num_iterations; }
  int next_index() const { return iteration_; }
  std::vector<Batch> next_iteration();

 private:
  std::uint64_t draw_length();
  std::uint64_t fresh_row_id(const std::unordered_set<std::uint64_t>& avoid);

  WorkloadSpec spec_;
  std::uint64_t rng_state_;
  int iteration_ = 0;
  std::vector<std::uint64_t> prev_pool_;  // unique row IDs of the previous iteration
  std::uint64_t fresh_cursor_ = 0;
  std::vector<double> empirical_cdf_;
};

/// Generate the whole workload into memory (desk-scale convenience).
std::vector<std::vector<Batch>> generate_all(const WorkloadSpec& spec);

/// Padding fraction when every sample is padded to the batch maximum:
/// 1 - sum(|uih_i|) / (max(|uih_i|) * B). Throws if all lengths are zero.
double measure_sparsity(const Batch& batch);
double measure_sparsity(std::span<const std::uint64_t> lengths);

/// Unique row IDs touched by one iteration across all ranks.
std::vector<std::uint64_t> unique_rows(const std::vector<Batch>& iteration);

/// Fraction of the next iteration's unique rows also present in the previous
/// iteration. Throws when the next iteration uses no rows.
double collision_fraction(const std::vector<std::uint64_t>& prev_unique,
                          const std::vector<std::uint64_t>& next_unique);

// ---- file format ------------------------------------------------------
//
// Binary stream: 8-byte magic, u32 header length, canonical JSON header with
// the WorkloadSpec, then per (iteration, rank): u32 sample count followed by
// one length-prefixed record per sample.

class Writer {
 public:
  Writer(const std::string& path, const WorkloadSpec& spec);
  ~Writer();
  void write_iteration(const std::vector<Batch>& batches);
  void close();

 private:
  struct Impl;
  Impl* impl_;
};

class Reader {
 public:
  explicit Reader(const std::string& path);
  ~Reader();
  const WorkloadSpec& spec() const;
  bool has_next() const;
  std::vector<Batch> next_iteration();

 private:
  struct Impl;
  Impl* impl_;
};

void save_workload(const std::string& path, const WorkloadSpec& spec,
                   const std::vector<std::vector<Batch>>& iterations);
std::pair<WorkloadSpec, std::vector<std::vector<Batch>>> load_workload(const std::string& path);

// Sample record codec, shared with the balancer's shuffle stage.
void encode_sample(const Sample& s, std::vector<std::uint8_t>& out);
Sample decode_sample(const std::uint8_t* data, std::size_t size, std::size_t& consumed);

}  // namespace freescale::workload

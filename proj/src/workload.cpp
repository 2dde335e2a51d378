#include "freescale/workload.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "freescale/rng.hpp"
#include "json.hpp"

namespace freescale::workload {

namespace {

// Candidate structure defaults: count ~ U(1,8), length ~ U(1,4).
constexpr std::uint64_t kCandCountLo = 1, kCandCountHi = 8;
constexpr std::uint64_t kCandLenLo = 1, kCandLenHi = 4;

std::uint64_t uniform_inclusive(std::uint64_t& state, std::uint64_t lo, std::uint64_t hi) {
  return lo + rng_below(state, hi - lo + 1);
}

}  // namespace

std::uint64_t Batch::total_uih_tokens() const {
  std::uint64_t total = 0;
  for (const auto& s : samples) total += s.uih.size();
  return total;
}

std::uint64_t Batch::max_uih_len() const {
  std::uint64_t m = 0;
  for (const auto& s : samples) m = std::max<std::uint64_t>(m, s.uih.size());
  return m;
}

IdJagged Batch::uih_ids() const {
  std::vector<std::uint64_t> values;
  std::vector<std::size_t> lengths;
  lengths.reserve(samples.size());
  for (const auto& s : samples) {
    values.insert(values.end(), s.uih.begin(), s.uih.end());
    lengths.push_back(s.uih.size());
  }
  return IdJagged(std::move(values), std::move(lengths));
}

DistSpec DistSpec::log_normal(double mu, double sigma) {
  DistSpec d;
  d.kind = LengthDist::LogNormal;
  d.mu = mu;
  d.sigma = sigma;
  return d;
}

DistSpec DistSpec::uniform(std::uint64_t lo, std::uint64_t hi) {
  DistSpec d;
  d.kind = LengthDist::Uniform;
  d.lo = lo;
  d.hi = hi;
  return d;
}

DistSpec DistSpec::empirical(std::vector<double> histogram) {
  DistSpec d;
  d.kind = LengthDist::Empirical;
  d.histogram = std::move(histogram);
  return d;
}

void WorkloadSpec::validate() const {
  if (num_ranks < 1) throw ConfigError("workload: num_ranks must be >= 1");
  if (batch_size < 1) throw ConfigError("workload: batch_size must be >= 1");
  if (num_iterations < 0) throw ConfigError("workload: num_iterations must be >= 0");
  if (table_rows == 0) throw ConfigError("workload: table_rows must be > 0");
  if (target_collision && (*target_collision < 0.0 || *target_collision > 1.0)) {
    throw ConfigError("workload: target_collision must be in [0,1]");
  }
  switch (dist.kind) {
    case LengthDist::Uniform:
      if (dist.lo > dist.hi) throw ConfigError("workload: uniform lo > hi");
      break;
    case LengthDist::Empirical: {
      double total = 0;
      for (double w : dist.histogram) {
        if (w < 0) throw ConfigError("workload: negative histogram weight");
        total += w;
      }
      if (total <= 0) throw ConfigError("workload: empirical histogram has no mass");
      break;
    }
    case LengthDist::LogNormal:
      if (dist.sigma < 0) throw ConfigError("workload: lognormal sigma must be >= 0");
      break;
  }
}

Generator::Generator(WorkloadSpec spec) : spec_(std::move(spec)), rng_state_(spec_.seed) {
  spec_.validate();
  if (spec_.dist.kind == LengthDist::Empirical) {
    empirical_cdf_.resize(spec_.dist.histogram.size());
    double acc = 0;
    for (std::size_t i = 0; i < empirical_cdf_.size(); ++i) {
      acc += spec_.dist.histogram[i];
      empirical_cdf_[i] = acc;
    }
  }
}

std::uint64_t Generator::draw_length() {
  std::uint64_t raw = 0;
  switch (spec_.dist.kind) {
    case LengthDist::LogNormal: {
      double x = std::exp(spec_.dist.mu + spec_.dist.sigma * rng_normal(rng_state_));
      raw = x >= 0 ? static_cast<std::uint64_t>(std::llround(x)) : 0;
      break;
    }
    case LengthDist::Uniform:
      raw = uniform_inclusive(rng_state_, spec_.dist.lo, spec_.dist.hi);
      break;
    case LengthDist::Empirical: {
      double u = rng_double(rng_state_) * empirical_cdf_.back();
      auto it = std::upper_bound(empirical_cdf_.begin(), empirical_cdf_.end(), u);
      raw = static_cast<std::uint64_t>(std::distance(empirical_cdf_.begin(), it));
      if (raw >= empirical_cdf_.size()) raw = empirical_cdf_.size() - 1;
      break;
    }
  }
  return std::min(raw, spec_.max_uih);
}

std::uint64_t Generator::fresh_row_id(const std::unordered_set<std::uint64_t>& avoid) {
  for (std::uint64_t tries = 0; tries < spec_.table_rows; ++tries) {
    std::uint64_t id = fresh_cursor_;
    fresh_cursor_ = (fresh_cursor_ + 1) % spec_.table_rows;
    if (!avoid.contains(id)) return id;
  }
  throw ConfigError("workload: table_rows too small to honor collision ratio");
}

std::vector<Batch> Generator::next_iteration() {
  if (!has_next()) throw ProtocolError("workload: generator exhausted");
  const int ranks = spec_.num_ranks;
  const int B = spec_.batch_size;

  std::vector<Batch> batches(static_cast<std::size_t>(ranks));
  std::uint64_t total_tokens = 0;
  for (int r = 0; r < ranks; ++r) {
    batches[r].rank = r;
    batches[r].samples.resize(static_cast<std::size_t>(B));
    for (auto& s : batches[r].samples) {
      s.uih.resize(draw_length());
      total_tokens += s.uih.size();
      s.candidates.resize(uniform_inclusive(rng_state_, kCandCountLo, kCandCountHi));
      for (auto& cand : s.candidates) {
        cand.resize(uniform_inclusive(rng_state_, kCandLenLo, kCandLenHi));
      }
    }
  }

  if (spec_.target_collision && total_tokens > 0) {
    const double ratio = *spec_.target_collision;
    // Unique-ID pool sized at a quarter of the token demand so rows repeat
    // within the iteration; every pool row is placed at least once, making
    // the measured collision fraction match the carried share exactly.
    std::uint64_t pool_size = std::max<std::uint64_t>(1, total_tokens / 4);
    pool_size = std::min(pool_size, total_tokens);
    if (iteration_ > 0 && ratio > 0.0) {
      // The carried share can never exceed the previous unique set, so cap
      // the pool to keep carry/pool_size == ratio exact even when demand grows.
      pool_size = std::max<std::uint64_t>(
          1, std::min<std::uint64_t>(
                 pool_size, static_cast<std::uint64_t>(static_cast<double>(prev_pool_.size()) / ratio)));
    }

    std::vector<std::uint64_t> pool;
    pool.reserve(pool_size);
    std::unordered_set<std::uint64_t> prev_set(prev_pool_.begin(), prev_pool_.end());
    std::uint64_t carry = 0;
    if (iteration_ > 0) {
      carry = std::min<std::uint64_t>(
          static_cast<std::uint64_t>(std::llround(ratio * static_cast<double>(pool_size))),
          prev_pool_.size());
      std::vector<std::uint64_t> shuffled = prev_pool_;
      rng_shuffle(rng_state_, shuffled);
      pool.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(carry));
    }
    const std::uint64_t fresh_needed = pool_size - carry;
    if (iteration_ > 0 && fresh_needed > spec_.table_rows - prev_set.size()) {
      throw ConfigError("workload: table_rows too small to honor collision ratio (need " +
                        std::to_string(fresh_needed) + " fresh rows, have " +
                        std::to_string(spec_.table_rows - prev_set.size()) + ")");
    }
    std::unordered_set<std::uint64_t> used(pool.begin(), pool.end());
    for (std::uint64_t k = 0; k < fresh_needed; ++k) {
      std::unordered_set<std::uint64_t>& avoid = iteration_ > 0 ? prev_set : used;
      std::uint64_t id = fresh_row_id(avoid);
      while (used.contains(id)) id = fresh_row_id(avoid);
      used.insert(id);
      pool.push_back(id);
    }

    // Token slots: each pool row once, the rest drawn from the pool, then a
    // global shuffle before slicing back into per-sample uih arrays.
    std::vector<std::uint64_t> slots;
    slots.reserve(total_tokens);
    slots.insert(slots.end(), pool.begin(), pool.end());
    for (std::uint64_t t = pool.size(); t < total_tokens; ++t) {
      slots.push_back(pool[rng_below(rng_state_, pool.size())]);
    }
    rng_shuffle(rng_state_, slots);
    std::size_t cursor = 0;
    for (auto& batch : batches) {
      for (auto& s : batch.samples) {
        for (auto& id : s.uih) id = slots[cursor++];
      }
    }
    prev_pool_ = std::move(pool);
    std::sort(prev_pool_.begin(), prev_pool_.end());
  } else {
    for (auto& batch : batches) {
      for (auto& s : batch.samples) {
        for (auto& id : s.uih) id = rng_below(rng_state_, spec_.table_rows);
      }
    }
    if (spec_.target_collision) prev_pool_.clear();
  }

  for (auto& batch : batches) {
    for (auto& s : batch.samples) {
      for (auto& cand : s.candidates) {
        for (auto& id : cand) id = rng_below(rng_state_, spec_.table_rows);
      }
      s.label = rng_double(rng_state_);
    }
  }

  ++iteration_;
  return batches;
}

std::vector<std::vector<Batch>> generate_all(const WorkloadSpec& spec) {
  Generator gen(spec);
  std::vector<std::vector<Batch>> out;
  out.reserve(static_cast<std::size_t>(spec.num_iterations));
  while (gen.has_next()) out.push_back(gen.next_iteration());
  return out;
}

double measure_sparsity(std::span<const std::uint64_t> lengths) {
  if (lengths.empty()) throw std::invalid_argument("sparsity: empty batch");
  std::uint64_t maxlen = 0, total = 0;
  for (std::uint64_t l : lengths) {
    maxlen = std::max(maxlen, l);
    total += l;
  }
  if (maxlen == 0) {
    throw std::invalid_argument("sparsity: undefined for all-zero lengths");
  }
  return 1.0 - static_cast<double>(total) /
                   (static_cast<double>(maxlen) * static_cast<double>(lengths.size()));
}

double measure_sparsity(const Batch& batch) {
  std::vector<std::uint64_t> lens;
  lens.reserve(batch.samples.size());
  for (const auto& s : batch.samples) lens.push_back(s.uih.size());
  return measure_sparsity(std::span<const std::uint64_t>(lens));
}

std::vector<std::uint64_t> unique_rows(const std::vector<Batch>& iteration) {
  std::vector<std::uint64_t> ids;
  for (const auto& b : iteration) {
    for (const auto& s : b.samples) ids.insert(ids.end(), s.uih.begin(), s.uih.end());
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

double collision_fraction(const std::vector<std::uint64_t>& prev_unique,
                          const std::vector<std::uint64_t>& next_unique) {
  if (next_unique.empty()) {
    throw std::invalid_argument("collision_fraction: next iteration uses no rows");
  }
  std::vector<std::uint64_t> both;
  std::set_intersection(prev_unique.begin(), prev_unique.end(), next_unique.begin(),
                        next_unique.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(next_unique.size());
}

// ---- codec -------------------------------------------------------------

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_le<std::uint64_t>(out, bits);
}

template <typename T>
T get_le(const std::uint8_t* data, std::size_t size, std::size_t& pos) {
  if (pos + sizeof(T) > size) throw IoError("workload: record truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
  }
  pos += sizeof(T);
  return static_cast<T>(v);
}

double get_f64(const std::uint8_t* data, std::size_t size, std::size_t& pos) {
  std::uint64_t bits = get_le<std::uint64_t>(data, size, pos);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

constexpr char kMagic[8] = {'F', 'S', 'C', 'L', 'W', 'K', 'L', '1'};

nlohmann::json dist_to_json(const DistSpec& d) {
  nlohmann::json j;
  switch (d.kind) {
    case LengthDist::LogNormal:
      j["kind"] = "lognormal";
      j["mu"] = d.mu;
      j["sigma"] = d.sigma;
      break;
    case LengthDist::Uniform:
      j["kind"] = "uniform";
      j["lo"] = d.lo;
      j["hi"] = d.hi;
      break;
    case LengthDist::Empirical:
      j["kind"] = "empirical";
      j["histogram"] = d.histogram;
      break;
  }
  return j;
}

DistSpec dist_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind");
  if (kind == "lognormal") return DistSpec::log_normal(j.at("mu"), j.at("sigma"));
  if (kind == "uniform") return DistSpec::uniform(j.at("lo"), j.at("hi"));
  if (kind == "empirical") return DistSpec::empirical(j.at("histogram"));
  throw IoError("workload: unknown distribution kind '" + kind + "'");
}

nlohmann::json spec_to_json(const WorkloadSpec& s) {
  nlohmann::json j;
  j["num_ranks"] = s.num_ranks;
  j["batch_size"] = s.batch_size;
  j["max_uih"] = s.max_uih;
  j["dist"] = dist_to_json(s.dist);
  j["table_rows"] = s.table_rows;
  if (s.target_collision) {
    j["target_collision"] = *s.target_collision;
  } else {
    j["target_collision"] = nullptr;
  }
  j["seed"] = s.seed;
  j["num_iterations"] = s.num_iterations;
  return j;
}

WorkloadSpec spec_from_json(const nlohmann::json& j) {
  WorkloadSpec s;
  s.num_ranks = j.at("num_ranks");
  s.batch_size = j.at("batch_size");
  s.max_uih = j.at("max_uih");
  s.dist = dist_from_json(j.at("dist"));
  s.table_rows = j.at("table_rows");
  if (!j.at("target_collision").is_null()) s.target_collision = j.at("target_collision").get<double>();
  s.seed = j.at("seed");
  s.num_iterations = j.at("num_iterations");
  return s;
}

}  // namespace

void encode_sample(const Sample& s, std::vector<std::uint8_t>& out) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.uih.size()));
  for (std::uint64_t id : s.uih) put_le<std::uint64_t>(out, id);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.candidates.size()));
  for (const auto& cand : s.candidates) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cand.size()));
    for (std::uint64_t id : cand) put_le<std::uint64_t>(out, id);
  }
  put_f64(out, s.label);
}

Sample decode_sample(const std::uint8_t* data, std::size_t size, std::size_t& consumed) {
  std::size_t pos = 0;
  Sample s;
  auto uih_count = get_le<std::uint32_t>(data, size, pos);
  s.uih.resize(uih_count);
  for (auto& id : s.uih) id = get_le<std::uint64_t>(data, size, pos);
  auto cand_count = get_le<std::uint32_t>(data, size, pos);
  s.candidates.resize(cand_count);
  for (auto& cand : s.candidates) {
    auto len = get_le<std::uint32_t>(data, size, pos);
    cand.resize(len);
    for (auto& id : cand) id = get_le<std::uint64_t>(data, size, pos);
  }
  s.label = get_f64(data, size, pos);
  consumed = pos;
  return s;
}

struct Writer::Impl {
  std::ofstream out;
  WorkloadSpec spec;
  int written_iterations = 0;
  bool closed = false;
};

Writer::Writer(const std::string& path, const WorkloadSpec& spec) : impl_(new Impl) {
  impl_->spec = spec;
  impl_->out.open(path, std::ios::binary | std::ios::trunc);
  if (!impl_->out) throw IoError("workload: cannot open '" + path + "' for writing");
  impl_->out.write(kMagic, sizeof(kMagic));
  const std::string header = spec_to_json(spec).dump();
  std::vector<std::uint8_t> len;
  put_le<std::uint32_t>(len, static_cast<std::uint32_t>(header.size()));
  impl_->out.write(reinterpret_cast<const char*>(len.data()), static_cast<std::streamsize>(len.size()));
  impl_->out.write(header.data(), static_cast<std::streamsize>(header.size()));
}

Writer::~Writer() {
  close();
  delete impl_;
}

void Writer::write_iteration(const std::vector<Batch>& batches) {
  if (impl_->closed) throw IoError("workload: writer already closed");
  if (batches.size() != static_cast<std::size_t>(impl_->spec.num_ranks)) {
    throw std::invalid_argument("workload: iteration must carry one batch per rank");
  }
  for (const auto& batch : batches) {
    std::vector<std::uint8_t> buf;
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(batch.samples.size()));
    for (const auto& s : batch.samples) {
      std::vector<std::uint8_t> rec;
      encode_sample(s, rec);
      put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(rec.size()));
      buf.insert(buf.end(), rec.begin(), rec.end());
    }
    impl_->out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  ++impl_->written_iterations;
}

void Writer::close() {
  if (!impl_->closed) {
    impl_->out.close();
    impl_->closed = true;
  }
}

struct Reader::Impl {
  std::ifstream in;
  WorkloadSpec spec;
  int iteration = 0;
};

Reader::Reader(const std::string& path) : impl_(new Impl) {
  impl_->in.open(path, std::ios::binary);
  if (!impl_->in) throw IoError("workload: cannot open '" + path + "'");
  char magic[8];
  impl_->in.read(magic, 8);
  if (impl_->in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) {
    throw IoError("workload: bad magic in '" + path + "'");
  }
  std::uint8_t lenbuf[4];
  impl_->in.read(reinterpret_cast<char*>(lenbuf), 4);
  if (impl_->in.gcount() != 4) throw IoError("workload: truncated header length");
  std::size_t pos = 0;
  auto header_len = get_le<std::uint32_t>(lenbuf, 4, pos);
  std::string header(header_len, '\0');
  impl_->in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (impl_->in.gcount() != static_cast<std::streamsize>(header_len)) {
    throw IoError("workload: truncated header");
  }
  try {
    impl_->spec = spec_from_json(nlohmann::json::parse(header));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("workload: malformed header: ") + e.what());
  }
}

Reader::~Reader() { delete impl_; }

const WorkloadSpec& Reader::spec() const { return impl_->spec; }

bool Reader::has_next() const { return impl_->iteration < impl_->spec.num_iterations; }

std::vector<Batch> Reader::next_iteration() {
  if (!has_next()) throw ProtocolError("workload: no more iterations in file");
  std::vector<Batch> batches(static_cast<std::size_t>(impl_->spec.num_ranks));
  for (int r = 0; r < impl_->spec.num_ranks; ++r) {
    auto fail = [&](int sample_idx) -> IoError {
      return IoError("workload: file truncated; last complete record is iteration " +
                     std::to_string(impl_->iteration) + ", rank " + std::to_string(r) +
                     ", sample " + std::to_string(sample_idx - 1));
    };
    std::uint8_t cntbuf[4];
    impl_->in.read(reinterpret_cast<char*>(cntbuf), 4);
    if (impl_->in.gcount() != 4) throw fail(0);
    std::size_t pos = 0;
    auto count = get_le<std::uint32_t>(cntbuf, 4, pos);
    batches[r].rank = r;
    batches[r].samples.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint8_t recl[4];
      impl_->in.read(reinterpret_cast<char*>(recl), 4);
      if (impl_->in.gcount() != 4) throw fail(static_cast<int>(i));
      pos = 0;
      auto rec_len = get_le<std::uint32_t>(recl, 4, pos);
      std::vector<std::uint8_t> rec(rec_len);
      impl_->in.read(reinterpret_cast<char*>(rec.data()), rec_len);
      if (impl_->in.gcount() != static_cast<std::streamsize>(rec_len)) throw fail(static_cast<int>(i));
      std::size_t consumed = 0;
      Sample s = decode_sample(rec.data(), rec.size(), consumed);
      if (consumed != rec.size()) {
        throw IoError("workload: record has trailing bytes at iteration " +
                      std::to_string(impl_->iteration) + ", rank " + std::to_string(r) +
                      ", sample " + std::to_string(i));
      }
      batches[r].samples.push_back(std::move(s));
    }
  }
  ++impl_->iteration;
  return batches;
}

void save_workload(const std::string& path, const WorkloadSpec& spec,
                   const std::vector<std::vector<Batch>>& iterations) {
  WorkloadSpec s = spec;
  s.num_iterations = static_cast<int>(iterations.size());
  Writer w(path, s);
  for (const auto& it : iterations) w.write_iteration(it);
}

std::pair<WorkloadSpec, std::vector<std::vector<Batch>>> load_workload(const std::string& path) {
  Reader r(path);
  std::vector<std::vector<Batch>> iterations;
  while (r.has_next()) iterations.push_back(r.next_iteration());
  return {r.spec(), std::move(iterations)};
}

}  // namespace freescale::workload

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "freescale/errors.hpp"

namespace freescale {

/// Irregularly shaped ("jagged") tensor: a flat value buffer plus per-segment
/// lengths. Offsets are the cached prefix sums of the lengths. Instances are
/// immutable after construction, so offsets can never go stale and sharing
/// across rank workers needs no synchronization.
template <typename T>
class JaggedTensor {
 public:
  JaggedTensor() : offsets_{0} {}

  JaggedTensor(std::vector<T> values, std::vector<std::size_t> lengths)
      : values_(std::move(values)), lengths_(std::move(lengths)) {
    offsets_.resize(lengths_.size() + 1);
    offsets_[0] = 0;
    for (std::size_t k = 0; k < lengths_.size(); ++k) {
      offsets_[k + 1] = offsets_[k] + lengths_[k];
    }
    if (offsets_.back() != values_.size()) {
      throw std::invalid_argument(
          "jagged: sum(lengths)=" + std::to_string(offsets_.back()) +
          " does not match len(values)=" + std::to_string(values_.size()));
    }
  }

  static JaggedTensor from_segments(const std::vector<std::vector<T>>& segments) {
    std::vector<T> values;
    std::vector<std::size_t> lengths;
    lengths.reserve(segments.size());
    for (const auto& seg : segments) {
      lengths.push_back(seg.size());
      values.insert(values.end(), seg.begin(), seg.end());
    }
    return JaggedTensor(std::move(values), std::move(lengths));
  }

  std::size_t num_segments() const { return lengths_.size(); }
  std::size_t total_values() const { return values_.size(); }

  std::size_t length(std::size_t k) const { return lengths_.at(k); }
  std::size_t offset(std::size_t k) const { return offsets_.at(k); }

  std::span<const T> segment(std::size_t k) const {
    if (k >= lengths_.size()) {
      throw std::out_of_range("jagged: segment index " + std::to_string(k) +
                              " out of range (have " + std::to_string(lengths_.size()) + ")");
    }
    return std::span<const T>(values_.data() + offsets_[k], lengths_[k]);
  }

  const std::vector<T>& values() const { return values_; }
  const std::vector<std::size_t>& lengths() const { return lengths_; }
  /// offsets()[k] is the start of segment k; offsets() has num_segments()+1
  /// entries and ends with total_values().
  const std::vector<std::size_t>& offsets() const { return offsets_; }

  std::vector<std::vector<T>> to_segments() const {
    std::vector<std::vector<T>> out(num_segments());
    for (std::size_t k = 0; k < num_segments(); ++k) {
      auto s = segment(k);
      out[k].assign(s.begin(), s.end());
    }
    return out;
  }

  bool operator==(const JaggedTensor&) const = default;

 private:
  std::vector<T> values_;
  std::vector<std::size_t> lengths_;
  std::vector<std::size_t> offsets_;
};

using IdJagged = JaggedTensor<std::uint64_t>;
using ValueJagged = JaggedTensor<double>;

/// Output segment j is input segment perm[j]. perm may select segments more
/// than once; every index must be in range.
template <typename T>
JaggedTensor<T> indexed_permute(const JaggedTensor<T>& t, std::span<const std::size_t> perm) {
  std::vector<T> values;
  std::vector<std::size_t> lengths;
  lengths.reserve(perm.size());
  std::size_t total = 0;
  for (std::size_t idx : perm) {
    if (idx >= t.num_segments()) {
      throw std::out_of_range("indexed_permute: segment index " + std::to_string(idx) +
                              " out of range (have " + std::to_string(t.num_segments()) + ")");
    }
    total += t.length(idx);
  }
  values.reserve(total);
  for (std::size_t idx : perm) {
    auto seg = t.segment(idx);
    values.insert(values.end(), seg.begin(), seg.end());
    lengths.push_back(seg.size());
  }
  return JaggedTensor<T>(std::move(values), std::move(lengths));
}

template <typename T>
JaggedTensor<T> indexed_permute(const JaggedTensor<T>& t, const std::vector<std::size_t>& perm) {
  return indexed_permute(t, std::span<const std::size_t>(perm));
}

struct SegmentRange {
  std::size_t start = 0;
  std::size_t count = 0;
};

/// Slice t into one output per destination range. Ranges must be disjoint and
/// within bounds; empty ranges are allowed anywhere.
template <typename T>
std::vector<JaggedTensor<T>> ranged_dispatch(const JaggedTensor<T>& t,
                                             std::span<const SegmentRange> ranges) {
  // Bounds first, then pairwise disjointness of the non-empty ranges.
  for (std::size_t d = 0; d < ranges.size(); ++d) {
    const auto& r = ranges[d];
    if (r.start + r.count > t.num_segments()) {
      throw std::out_of_range("ranged_dispatch: range " + std::to_string(d) + " = (" +
                              std::to_string(r.start) + "," + std::to_string(r.count) +
                              ") exceeds segment count " + std::to_string(t.num_segments()));
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (start, end)
  for (const auto& r : ranges) {
    if (r.count > 0) spans.emplace_back(r.start, r.start + r.count);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) {
      throw std::invalid_argument("ranged_dispatch: overlapping ranges at segment " +
                                  std::to_string(spans[i].first));
    }
  }
  std::vector<JaggedTensor<T>> out;
  out.reserve(ranges.size());
  for (const auto& r : ranges) {
    std::vector<T> values(t.values().begin() + static_cast<std::ptrdiff_t>(t.offset(r.start)),
                          t.values().begin() +
                              static_cast<std::ptrdiff_t>(r.count == 0
                                                              ? t.offset(r.start)
                                                              : t.offset(r.start + r.count - 1) +
                                                                    t.length(r.start + r.count - 1)));
    std::vector<std::size_t> lengths(t.lengths().begin() + static_cast<std::ptrdiff_t>(r.start),
                                     t.lengths().begin() + static_cast<std::ptrdiff_t>(r.start + r.count));
    out.emplace_back(std::move(values), std::move(lengths));
  }
  return out;
}

template <typename T>
std::vector<JaggedTensor<T>> ranged_dispatch(const JaggedTensor<T>& t,
                                             const std::vector<SegmentRange>& ranges) {
  return ranged_dispatch(t, std::span<const SegmentRange>(ranges));
}

/// Concatenate parts segment-wise, in part order. Inverse of a full ordered
/// ranged_dispatch.
template <typename T>
JaggedTensor<T> ranged_combine(std::span<const JaggedTensor<T>> parts) {
  std::size_t total_vals = 0, total_segs = 0;
  for (const auto& p : parts) {
    total_vals += p.total_values();
    total_segs += p.num_segments();
  }
  std::vector<T> values;
  values.reserve(total_vals);
  std::vector<std::size_t> lengths;
  lengths.reserve(total_segs);
  for (const auto& p : parts) {
    values.insert(values.end(), p.values().begin(), p.values().end());
    lengths.insert(lengths.end(), p.lengths().begin(), p.lengths().end());
  }
  return JaggedTensor<T>(std::move(values), std::move(lengths));
}

template <typename T>
JaggedTensor<T> ranged_combine(const std::vector<JaggedTensor<T>>& parts) {
  return ranged_combine(std::span<const JaggedTensor<T>>(parts));
}

enum class KeyedLayout { FeatureMajor, BatchMajor };

/// Jagged tensor whose segments are the cross product of named features and
/// samples, grouped either feature-major (all segments of feature 0 first) or
/// batch-major (all features of sample 0 first).
template <typename T>
struct KeyedJaggedTensor {
  std::vector<std::string> keys;
  JaggedTensor<T> inner;
  KeyedLayout layout = KeyedLayout::FeatureMajor;
  std::size_t num_samples = 0;

  KeyedJaggedTensor() = default;
  KeyedJaggedTensor(std::vector<std::string> k, JaggedTensor<T> in, KeyedLayout lay)
      : keys(std::move(k)), inner(std::move(in)), layout(lay) {
    if (keys.empty()) throw std::invalid_argument("keyed jagged: no keys");
    if (inner.num_segments() % keys.size() != 0) {
      throw std::invalid_argument("keyed jagged: segment count " +
                                  std::to_string(inner.num_segments()) +
                                  " not divisible by key count " + std::to_string(keys.size()));
    }
    num_samples = inner.num_segments() / keys.size();
  }

  /// Segment for (feature f, sample s) regardless of layout.
  std::span<const T> at(std::size_t f, std::size_t s) const {
    return layout == KeyedLayout::FeatureMajor ? inner.segment(f * num_samples + s)
                                               : inner.segment(s * keys.size() + f);
  }

  bool operator==(const KeyedJaggedTensor&) const = default;
};

/// Flip between feature-major and batch-major grouping. An involution: the
/// (f, s) segment is unchanged, only the segment order moves.
template <typename T>
KeyedJaggedTensor<T> keyed_transpose(const KeyedJaggedTensor<T>& kt) {
  const std::size_t num_keys = kt.keys.size();
  const std::size_t num_samples = kt.num_samples;
  std::vector<std::size_t> perm(num_keys * num_samples);
  if (kt.layout == KeyedLayout::FeatureMajor) {
    // target order: (s, f); source index of (f, s) is f*S + s
    for (std::size_t s = 0; s < num_samples; ++s)
      for (std::size_t f = 0; f < num_keys; ++f) perm[s * num_keys + f] = f * num_samples + s;
  } else {
    for (std::size_t f = 0; f < num_keys; ++f)
      for (std::size_t s = 0; s < num_samples; ++s) perm[f * num_samples + s] = s * num_keys + f;
  }
  KeyedJaggedTensor<T> out;
  out.keys = kt.keys;
  out.inner = indexed_permute(kt.inner, perm);
  out.layout = kt.layout == KeyedLayout::FeatureMajor ? KeyedLayout::BatchMajor
                                                      : KeyedLayout::FeatureMajor;
  out.num_samples = num_samples;
  return out;
}

}  // namespace freescale

#pragma once

#include "camelot/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace camelot {

enum class Similarity { cosine, negative_euclidean };

inline std::string_view to_string(Similarity kind) {
  return kind == Similarity::cosine ? "cosine" : "euclidean";
}

inline Similarity parse_similarity(std::string_view name) {
  if (name == "cosine") return Similarity::cosine;
  if (name == "euclidean" || name == "negative-euclidean") return Similarity::negative_euclidean;
  throw std::invalid_argument("unknown similarity: " + std::string(name));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double distance(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

inline bool all_finite(std::span<const double> a) {
  for (double x : a)
    if (!std::isfinite(x)) return false;
  return true;
}

namespace detail {

// sqrt(fl(x*x)) == x, so dot(a,a)/sqrt(dot(a,a)^2) is exactly 1 and a
// duplicate key still clears R = 1.
inline double clamp_cosine(double c) { return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c); }

// Scan-time cosine: a zero-norm operand scores 0 instead of throwing, so a
// consolidated mean that cancels to zero stays addressable.
inline double scan_similarity(std::span<const double> key, std::span<const double> query,
                              double query_sq_norm, Similarity kind) {
  if (kind == Similarity::negative_euclidean) return -distance(key, query);
  const double kk = dot(key, key);
  if (kk == 0.0 || query_sq_norm == 0.0) return 0.0;
  return clamp_cosine(dot(key, query) / std::sqrt(kk * query_sq_norm));
}

}  // namespace detail

/// Similarity score; higher is more similar for both kinds.
/// Rejects mismatched lengths and, for cosine, zero vectors.
inline double similarity(std::span<const double> a, std::span<const double> b, Similarity kind) {
  if (a.size() != b.size()) throw std::invalid_argument("similarity: dimension mismatch");
  if (kind == Similarity::negative_euclidean) return -distance(a, b);
  const double aa = dot(a, a);
  const double bb = dot(b, b);
  if (aa == 0.0 || bb == 0.0) throw std::invalid_argument("similarity: cosine of a zero vector");
  return detail::clamp_cosine(dot(a, b) / std::sqrt(aa * bb));
}


struct SlotMatch {
  std::size_t index = 0;
  double score = 0.0;
};

/// Exact argmax over rows `0..rows` of `row_of(i)` for which `is_occupied(i)`
/// holds. Ties resolve to the lowest index. Returns nullopt if nothing is
/// occupied.
template <class RowFn, class OccupiedFn>
std::optional<SlotMatch> scan_nearest(std::size_t rows, RowFn&& row_of, OccupiedFn&& is_occupied,
                                      std::span<const double> query, Similarity kind) {
  const double qq = kind == Similarity::cosine ? dot(query, query) : 0.0;
  std::optional<SlotMatch> best;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!is_occupied(i)) continue;
    const double s = detail::scan_similarity(row_of(i), query, qq, kind);
    if (!best || s > best->score) best = SlotMatch{i, s};
  }
  return best;
}

/// Exact nearest occupied key. nullopt signals an empty bank.
inline std::optional<SlotMatch> nearest_slot(const std::vector<DenseVector>& keys,
                                             const std::vector<bool>& occupied,
                                             std::span<const double> query, Similarity kind) {
  if (occupied.size() != keys.size())
    throw std::invalid_argument("nearest_slot: occupancy flags do not match key count");
  for (std::size_t i = 0; i < keys.size(); ++i)
    if (occupied[i] && keys[i].size() != query.size())
      throw std::invalid_argument("nearest_slot: dimension mismatch");
  if (kind == Similarity::cosine && norm(query) == 0.0)
    throw std::invalid_argument("nearest_slot: cosine of a zero query");
  return scan_nearest(
      keys.size(), [&](std::size_t i) { return std::span<const double>(keys[i]); },
      [&](std::size_t i) { return static_cast<bool>(occupied[i]); }, query, kind);
}

/// Chord length R_hat = sqrt(2(1 - R)): for unit vectors,
/// cosine(a, b) >= R  <=>  |a - b| <= R_hat.
inline double threshold_to_radius(double threshold) {
  if (!(threshold >= -1.0 && threshold <= 1.0))
    throw std::invalid_argument("threshold_to_radius: R must lie in [-1, 1]");
  return std::sqrt(2.0 * (1.0 - threshold));
}

}  // namespace camelot

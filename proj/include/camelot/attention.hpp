#pragma once

// Attention over a retrieved prefix followed by the native window:
//
//   K' = K_r (+) [K_1..K_L],  V' = V_r (+) [V_1..V_L]
//   a_i = sum_t softmax_t(scale * <Q_i, K'_t>) V'_t,  t in prefix or t <= i
//
// The prefix is position-free and visible to every query.

#include "camelot/memory_bank.hpp"
#include "camelot/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace camelot {

struct AugmentedKv {
  Matrix keys;    // (P + L) x d
  Matrix values;  // (P + L) x dv
  std::size_t prefix_len = 0;

  std::size_t native_len() const { return static_cast<std::size_t>(keys.rows()) - prefix_len; }
};

/// One context window split by head: queries/keys/values[h] are L x head_dim.
struct KvWindow {
  std::vector<Matrix> queries;
  std::vector<Matrix> keys;
  std::vector<Matrix> values;

  std::size_t heads() const { return queries.size(); }
  std::size_t length() const { return queries.empty() ? 0 : static_cast<std::size_t>(queries.front().rows()); }
};

inline double default_attention_scale(std::size_t head_dim) { return 1.0 / std::sqrt(static_cast<double>(head_dim)); }

/// Concatenates the retrieved entries in front of the native ones.
inline AugmentedKv augment(const Matrix& native_keys, const Matrix& native_values, const ReadResult& read) {
  if (native_keys.rows() != native_values.rows())
    throw std::invalid_argument("augment: native keys and values differ in length");
  const auto p = static_cast<Eigen::Index>(read.size());
  if (p > 0 && (read.keys.cols() != native_keys.cols() || read.values.cols() != native_values.cols()))
    throw std::invalid_argument("augment: dimension mismatch between retrieved and native entries");
  AugmentedKv kv;
  kv.prefix_len = read.size();
  kv.keys.resize(p + native_keys.rows(), native_keys.cols());
  kv.values.resize(p + native_values.rows(), native_values.cols());
  if (p > 0) {
    kv.keys.topRows(p) = read.keys;
    kv.values.topRows(p) = read.values;
  }
  kv.keys.bottomRows(native_keys.rows()) = native_keys;
  kv.values.bottomRows(native_values.rows()) = native_values;
  return kv;
}

/// Causal attention with a fully visible prefix. When `weights` is given it
/// receives the L x (P + L) softmax weights, zero where masked.
inline Matrix prefix_causal_attention(const Matrix& queries, const AugmentedKv& kv, double scale,
                                      Matrix* weights = nullptr) {
  if (!(scale > 0.0)) throw std::invalid_argument("prefix_causal_attention: scale must be positive");
  if (kv.keys.rows() != kv.values.rows() || static_cast<std::size_t>(kv.keys.rows()) < kv.prefix_len)
    throw std::invalid_argument("prefix_causal_attention: malformed augmented cache");
  const auto len = queries.rows();
  const auto p = static_cast<Eigen::Index>(kv.prefix_len);
  if (static_cast<std::size_t>(len) != kv.native_len())
    throw std::invalid_argument("prefix_causal_attention: query count must equal native window length");
  if (len > 0 && queries.cols() != kv.keys.cols())
    throw std::invalid_argument("prefix_causal_attention: query/key dimension mismatch");

  const auto total = p + len;
  Matrix out = Matrix::Zero(len, kv.values.cols());
  if (weights) *weights = Matrix::Zero(len, total);
  std::vector<double> logits(static_cast<std::size_t>(total));

  for (Eigen::Index i = 0; i < len; ++i) {
    const auto q = row_span(queries, i);
    const Eigen::Index visible = p + i + 1;
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index t = 0; t < visible; ++t) {
      logits[static_cast<std::size_t>(t)] = scale * dot(q, row_span(kv.keys, t));
      peak = std::max(peak, logits[static_cast<std::size_t>(t)]);
    }
    double z = 0.0;
    for (Eigen::Index t = 0; t < visible; ++t) {
      auto& l = logits[static_cast<std::size_t>(t)];
      l = std::exp(l - peak);
      z += l;
    }
    auto o = row_span(out, i);
    for (Eigen::Index t = 0; t < visible; ++t) {
      const double w = logits[static_cast<std::size_t>(t)] / z;
      if (weights) (*weights)(i, t) = w;
      const auto v = row_span(kv.values, t);
      for (std::size_t j = 0; j < o.size(); ++j) o[j] += w * v[j];
    }
  }
  return out;
}

/// Runs prefix attention per head and concatenates head outputs along the
/// feature axis, in head order. An empty `reads` means no retrieval.
inline Matrix attend_heads(const KvWindow& window, const std::vector<ReadResult>& reads, double scale) {
  const std::size_t heads = window.heads();
  if (heads == 0) throw std::invalid_argument("attend_heads: no heads");
  if (window.keys.size() != heads || window.values.size() != heads)
    throw std::invalid_argument("attend_heads: head-count mismatch in window");
  if (!reads.empty() && reads.size() != heads)
    throw std::invalid_argument("attend_heads: head-count mismatch between window and reads");
  const auto len = window.queries.front().rows();
  Eigen::Index width = 0;
  for (std::size_t h = 0; h < heads; ++h) {
    if (window.queries[h].rows() != len || window.keys[h].rows() != len || window.values[h].rows() != len)
      throw std::invalid_argument("attend_heads: heads disagree on window length");
    width += window.values[h].cols();
  }
  Matrix out(len, width);
  Eigen::Index col = 0;
  const ReadResult none;
  for (std::size_t h = 0; h < heads; ++h) {
    const auto kv = augment(window.keys[h], window.values[h], reads.empty() ? none : reads[h]);
    const Matrix a = prefix_causal_attention(window.queries[h], kv, scale);
    out.middleCols(col, a.cols()) = a;
    col += a.cols();
  }
  return out;
}

}  // namespace camelot

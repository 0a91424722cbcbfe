#pragma once

// Character-level decoder-only transformer used as the frozen backbone.
//
// Pre-norm residual blocks with learned absolute position embeddings added at
// the input, so the keys and values handed to memory banks carry no rotary or
// relative position transform:
//
//   x = E[tok] + S[prev tok] + P[pos]   (S row V stands for "no previous token")
//   x += Wo * attn(LN1(x))          (multi-head causal, optionally memory-augmented)
//   x += W2 * gelu(W1 * LN2(x) + b1) + b2
//   logits = LNf(x) * Wout + bout

#include "camelot/attention.hpp"
#include "camelot/lm/vocab.hpp"
#include "camelot/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace camelot::lm {

struct ModelShape {
  std::size_t vocab_size = 0;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t head_dim = 16;
  std::size_t max_positions = 128;
  std::size_t mlp_hidden = 32;
  // Adds a learned embedding of the preceding token to each input position.
  bool token_shift = true;

  std::size_t model_dim() const { return heads * head_dim; }

  void validate() const {
    if (vocab_size == 0 || layers == 0 || heads == 0 || head_dim == 0 || max_positions == 0 || mlp_hidden == 0)
      throw std::invalid_argument("ModelShape: all sizes must be positive");
  }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Offsets of every parameter block inside the flat parameter vector.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::size_t tok_emb = 0, shift_emb = 0, pos_emb = 0;
  std::vector<Layer> layers;
  std::size_t lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0;
  std::size_t total = 0;

  explicit ParamLayout(const ModelShape& s) {
    const std::size_t d = s.model_dim(), f = s.mlp_hidden;
    auto take = [this](std::size_t n) {
      const std::size_t at = total;
      total += n;
      return at;
    };
    tok_emb = take(s.vocab_size * d);
    shift_emb = take(s.token_shift ? (s.vocab_size + 1) * d : 0);
    pos_emb = take(s.max_positions * d);
    for (std::size_t l = 0; l < s.layers; ++l) {
      Layer ly{};
      ly.ln1_g = take(d);
      ly.ln1_b = take(d);
      ly.wq = take(d * d);
      ly.wk = take(d * d);
      ly.wv = take(d * d);
      ly.wo = take(d * d);
      ly.ln2_g = take(d);
      ly.ln2_b = take(d);
      ly.w1 = take(d * f);
      ly.b1 = take(f);
      ly.w2 = take(f * d);
      ly.b2 = take(d);
      layers.push_back(ly);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    w_out = take(d * s.vocab_size);
    b_out = take(s.vocab_size);
  }
};

using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using RowMap = Eigen::Map<RowVec>;
using ConstRowMap = Eigen::Map<const RowVec>;

/// Per-layer memory hooks for the inference path. `read` runs before
/// attention and returns one ReadResult per head (or none); `write` runs
/// after attention with the same window.
class LayerMemory {
 public:
  virtual ~LayerMemory() = default;
  virtual std::vector<ReadResult> read(std::size_t layer, const KvWindow& window) = 0;
  virtual void write(std::size_t layer, const KvWindow& window) = 0;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;
inline const double kGeluC = std::sqrt(2.0 / 3.14159265358979323846);

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd rstd;
};

inline Matrix layer_norm(const Matrix& x, ConstRowMap g, ConstRowMap b, LayerNormCache* cache = nullptr) {
  const auto n = x.rows();
  Matrix xhat(n, x.cols());
  Eigen::VectorXd rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = (x.row(i).array() - mu) * rstd(i);
  }
  Matrix h = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return h;
}

inline Matrix layer_norm_backward(const Matrix& dh, const LayerNormCache& c, ConstRowMap g, RowMap dg, RowMap db) {
  dg += (dh.array() * c.xhat.array()).colwise().sum().matrix();
  db += dh.colwise().sum();
  const Matrix dxhat = dh.array().rowwise() * g.array();
  const double inv_d = 1.0 / static_cast<double>(dh.cols());
  Matrix dx(dh.rows(), dh.cols());
  for (Eigen::Index i = 0; i < dh.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() * inv_d;
    const double m2 = dxhat.row(i).dot(c.xhat.row(i)) * inv_d;
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

inline double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

}  // namespace detail

class TinyLm {
 public:
  TinyLm() : layout_(ModelShape{1, 1, 1, 1, 1, 1}) {}

  TinyLm(ModelShape shape, CharVocab vocab) : shape_(shape), vocab_(std::move(vocab)), layout_(shape) {
    shape_.validate();
    if (vocab_.size() != shape_.vocab_size) throw std::invalid_argument("TinyLm: vocab size mismatch");
    params_.assign(layout_.total, 0.0);
  }

  /// Random initialisation: scaled normal weights, unit LayerNorm gains.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double d = static_cast<double>(shape_.model_dim());
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(shape_.layers));
    auto fill = [&](std::size_t off, std::size_t n, double sd) {
      std::normal_distribution<double> nd(0.0, sd);
      for (std::size_t i = 0; i < n; ++i) params_[off + i] = nd(rng);
    };
    auto ones = [&](std::size_t off) { std::fill_n(params_.begin() + static_cast<long>(off), shape_.model_dim(), 1.0); };
    const std::size_t dm = shape_.model_dim(), f = shape_.mlp_hidden;
    fill(layout_.tok_emb, shape_.vocab_size * dm, 0.3);
    if (shape_.token_shift) fill(layout_.shift_emb, (shape_.vocab_size + 1) * dm, 0.3);
    fill(layout_.pos_emb, shape_.max_positions * dm, 0.3);
    for (const auto& ly : layout_.layers) {
      ones(ly.ln1_g);
      ones(ly.ln2_g);
      fill(ly.wq, dm * dm, 1.0 / std::sqrt(d));
      fill(ly.wk, dm * dm, 1.0 / std::sqrt(d));
      fill(ly.wv, dm * dm, 1.0 / std::sqrt(d));
      fill(ly.wo, dm * dm, resid / std::sqrt(d));
      fill(ly.w1, dm * f, 1.0 / std::sqrt(d));
      fill(ly.w2, f * dm, resid / std::sqrt(static_cast<double>(f)));
    }
    ones(layout_.lnf_g);
    fill(layout_.w_out, dm * shape_.vocab_size, 1.0 / std::sqrt(d));
  }

  const ModelShape& shape() const { return shape_; }
  const CharVocab& vocab() const { return vocab_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  double attention_scale() const { return default_attention_scale(shape_.head_dim); }

  /// Logits for every position of one window. With `memory`, each layer's
  /// per-head keys/values are offered to the hooks (read, attend, write).
  Matrix logits(std::span<const TokenId> tokens, LayerMemory* memory = nullptr) const {
    check_tokens(tokens);
    const auto dm = static_cast<Eigen::Index>(shape_.model_dim());
    const auto hd = static_cast<Eigen::Index>(shape_.head_dim);
    Matrix x = embed(tokens);
    for (std::size_t l = 0; l < shape_.layers; ++l) {
      const auto& ly = layout_.layers[l];
      const Matrix h = detail::layer_norm(x, row(ly.ln1_g, dm), row(ly.ln1_b, dm));
      const Matrix q = h * mat(ly.wq, dm, dm);
      const Matrix k = h * mat(ly.wk, dm, dm);
      const Matrix v = h * mat(ly.wv, dm, dm);
      KvWindow w;
      for (std::size_t head = 0; head < shape_.heads; ++head) {
        const auto c0 = static_cast<Eigen::Index>(head) * hd;
        w.queries.emplace_back(q.middleCols(c0, hd));
        w.keys.emplace_back(k.middleCols(c0, hd));
        w.values.emplace_back(v.middleCols(c0, hd));
      }
      std::vector<ReadResult> reads;
      if (memory) reads = memory->read(l, w);
      const Matrix o = attend_heads(w, reads, attention_scale());
      if (memory) memory->write(l, w);
      x += o * mat(ly.wo, dm, dm);
      x += mlp(x, ly);
    }
    const Matrix hf = detail::layer_norm(x, row(layout_.lnf_g, dm), row(layout_.lnf_b, dm));
    Matrix out = hf * mat(layout_.w_out, dm, static_cast<Eigen::Index>(shape_.vocab_size));
    out.rowwise() += row(layout_.b_out, static_cast<Eigen::Index>(shape_.vocab_size));
    return out;
  }

  /// Mean next-token NLL over the sequence and its gradient (accumulated into
  /// `grad`, scaled by `weight`). No memory is involved in training.
  double loss_and_grad(std::span<const TokenId> tokens, std::vector<double>& grad, double weight = 1.0) const {
    check_tokens(tokens);
    if (tokens.size() < 2) throw std::invalid_argument("loss_and_grad: need at least two tokens");
    if (grad.size() != params_.size()) grad.assign(params_.size(), 0.0);
    const auto t = static_cast<Eigen::Index>(tokens.size());
    const auto dm = static_cast<Eigen::Index>(shape_.model_dim());
    const auto hd = static_cast<Eigen::Index>(shape_.head_dim);
    const auto f = static_cast<Eigen::Index>(shape_.mlp_hidden);
    const auto nv = static_cast<Eigen::Index>(shape_.vocab_size);
    const double scale = attention_scale();

    struct LayerCache {
      Matrix x_in, h1, q, k, v, o, x_mid, h2, u, g;
      detail::LayerNormCache ln1, ln2;
      std::vector<Matrix> probs;
    };
    std::vector<LayerCache> caches(shape_.layers);

    Matrix x = embed(tokens);
    for (std::size_t l = 0; l < shape_.layers; ++l) {
      const auto& ly = layout_.layers[l];
      auto& c = caches[l];
      c.x_in = x;
      c.h1 = detail::layer_norm(x, row(ly.ln1_g, dm), row(ly.ln1_b, dm), &c.ln1);
      c.q = c.h1 * mat(ly.wq, dm, dm);
      c.k = c.h1 * mat(ly.wk, dm, dm);
      c.v = c.h1 * mat(ly.wv, dm, dm);
      c.o.resize(t, dm);
      for (std::size_t head = 0; head < shape_.heads; ++head) {
        const auto c0 = static_cast<Eigen::Index>(head) * hd;
        Matrix s = scale * (c.q.middleCols(c0, hd) * c.k.middleCols(c0, hd).transpose());
        for (Eigen::Index i = 0; i < t; ++i) {
          const double peak = s.row(i).head(i + 1).maxCoeff();
          double z = 0.0;
          for (Eigen::Index j = 0; j < t; ++j) {
            s(i, j) = j <= i ? std::exp(s(i, j) - peak) : 0.0;
            z += s(i, j);
          }
          s.row(i) /= z;
        }
        c.o.middleCols(c0, hd) = s * c.v.middleCols(c0, hd);
        c.probs.push_back(std::move(s));
      }
      x += c.o * mat(ly.wo, dm, dm);
      c.x_mid = x;
      c.h2 = detail::layer_norm(x, row(ly.ln2_g, dm), row(ly.ln2_b, dm), &c.ln2);
      c.u = c.h2 * mat(ly.w1, dm, f);
      c.u.rowwise() += row(ly.b1, f);
      c.g = c.u.unaryExpr([](double u) { return detail::gelu(u); });
      Matrix m = c.g * mat(ly.w2, f, dm);
      m.rowwise() += row(ly.b2, dm);
      x += m;
    }
    detail::LayerNormCache lnf;
    const Matrix hf = detail::layer_norm(x, row(layout_.lnf_g, dm), row(layout_.lnf_b, dm), &lnf);
    Matrix logits = hf * mat(layout_.w_out, dm, nv);
    logits.rowwise() += row(layout_.b_out, nv);

    const double n_targets = static_cast<double>(t - 1);
    double loss = 0.0;
    Matrix dlogits = Matrix::Zero(t, nv);
    for (Eigen::Index i = 0; i + 1 < t; ++i) {
      const double peak = logits.row(i).maxCoeff();
      const Eigen::ArrayXd e = (logits.row(i).array() - peak).exp().transpose();
      const double z = e.sum();
      const auto target = tokens[static_cast<std::size_t>(i + 1)];
      loss += -(logits(i, target) - peak - std::log(z));
      dlogits.row(i) = (e / z).transpose().matrix();
      dlogits(i, target) -= 1.0;
    }
    loss /= n_targets;
    dlogits *= weight / n_targets;

    auto gmat = [&](std::size_t off, Eigen::Index r, Eigen::Index cc) { return MatMap(grad.data() + off, r, cc); };
    auto grow = [&](std::size_t off, Eigen::Index n) { return RowMap(grad.data() + off, n); };

    gmat(layout_.w_out, dm, nv) += hf.transpose() * dlogits;
    grow(layout_.b_out, nv) += dlogits.colwise().sum();
    Matrix dx = detail::layer_norm_backward(dlogits * mat(layout_.w_out, dm, nv).transpose(), lnf,
                                            row(layout_.lnf_g, dm), grow(layout_.lnf_g, dm), grow(layout_.lnf_b, dm));

    for (std::size_t l = shape_.layers; l-- > 0;) {
      const auto& ly = layout_.layers[l];
      const auto& c = caches[l];
      // MLP branch.
      gmat(ly.w2, f, dm) += c.g.transpose() * dx;
      grow(ly.b2, dm) += dx.colwise().sum();
      Matrix du = dx * mat(ly.w2, f, dm).transpose();
      du.array() *= c.u.unaryExpr([](double u) { return detail::gelu_grad(u); }).array();
      gmat(ly.w1, dm, f) += c.h2.transpose() * du;
      grow(ly.b1, f) += du.colwise().sum();
      dx += detail::layer_norm_backward(du * mat(ly.w1, dm, f).transpose(), c.ln2, row(ly.ln2_g, dm),
                                        grow(ly.ln2_g, dm), grow(ly.ln2_b, dm));
      // Attention branch.
      gmat(ly.wo, dm, dm) += c.o.transpose() * dx;
      const Matrix d_o = dx * mat(ly.wo, dm, dm).transpose();
      Matrix dq(t, dm), dk(t, dm), dv(t, dm);
      for (std::size_t head = 0; head < shape_.heads; ++head) {
        const auto c0 = static_cast<Eigen::Index>(head) * hd;
        const Matrix& p = c.probs[head];
        const Matrix doh = d_o.middleCols(c0, hd);
        dv.middleCols(c0, hd) = p.transpose() * doh;
        const Matrix dp = doh * c.v.middleCols(c0, hd).transpose();
        Matrix ds = p.array() * dp.array();
        const Eigen::VectorXd rowdot = ds.rowwise().sum();
        ds -= (p.array().colwise() * rowdot.array()).matrix();
        ds *= scale;
        dq.middleCols(c0, hd) = ds * c.k.middleCols(c0, hd);
        dk.middleCols(c0, hd) = ds.transpose() * c.q.middleCols(c0, hd);
      }
      gmat(ly.wq, dm, dm) += c.h1.transpose() * dq;
      gmat(ly.wk, dm, dm) += c.h1.transpose() * dk;
      gmat(ly.wv, dm, dm) += c.h1.transpose() * dv;
      const Matrix dh1 = dq * mat(ly.wq, dm, dm).transpose() + dk * mat(ly.wk, dm, dm).transpose() +
                         dv * mat(ly.wv, dm, dm).transpose();
      dx += detail::layer_norm_backward(dh1, c.ln1, row(ly.ln1_g, dm), grow(ly.ln1_g, dm), grow(ly.ln1_b, dm));
    }
    for (Eigen::Index i = 0; i < t; ++i) {
      grow(layout_.tok_emb + static_cast<std::size_t>(tokens[static_cast<std::size_t>(i)]) * shape_.model_dim(), dm) +=
          dx.row(i);
      grow(layout_.pos_emb + static_cast<std::size_t>(i) * shape_.model_dim(), dm) += dx.row(i);
      if (shape_.token_shift) grow(shift_row(tokens, static_cast<std::size_t>(i)), dm) += dx.row(i);
    }
    return loss;
  }

  /// Mean next-token NLL of a sequence without memory (no gradient).
  double mean_nll(std::span<const TokenId> tokens) const {
    const Matrix lg = logits(tokens);
    double total = 0.0;
    for (Eigen::Index i = 0; i + 1 < lg.rows(); ++i)
      total += token_nll(lg, i, tokens[static_cast<std::size_t>(i + 1)]);
    return total / static_cast<double>(lg.rows() - 1);
  }

  /// -log softmax(logits.row(i))[target], computed stably.
  static double token_nll(const Matrix& logits, Eigen::Index i, TokenId target) {
    const double peak = logits.row(i).maxCoeff();
    const double z = (logits.row(i).array() - peak).exp().sum();
    return -(logits(i, target) - peak - std::log(z));
  }

  void check_tokens(std::span<const TokenId> tokens) const {
    if (tokens.size() > shape_.max_positions)
      throw std::invalid_argument("TinyLm: sequence longer than max_positions");
    for (auto id : tokens)
      if (id < 0 || static_cast<std::size_t>(id) >= shape_.vocab_size)
        throw std::out_of_range("TinyLm: token id " + std::to_string(id) + " outside the vocabulary");
  }

 private:
  ConstMatMap mat(std::size_t off, Eigen::Index r, Eigen::Index c) const { return {params_.data() + off, r, c}; }
  ConstRowMap row(std::size_t off, Eigen::Index n) const { return {params_.data() + off, n}; }

  Matrix embed(std::span<const TokenId> tokens) const {
    const auto dm = static_cast<Eigen::Index>(shape_.model_dim());
    Matrix x(static_cast<Eigen::Index>(tokens.size()), dm);
    for (std::size_t i = 0; i < tokens.size(); ++i)
      x.row(static_cast<Eigen::Index>(i)) =
          row(layout_.tok_emb + static_cast<std::size_t>(tokens[i]) * shape_.model_dim(), dm) +
          row(layout_.pos_emb + i * shape_.model_dim(), dm);
    if (shape_.token_shift)
      for (std::size_t i = 0; i < tokens.size(); ++i) x.row(static_cast<Eigen::Index>(i)) += row(shift_row(tokens, i), dm);
    return x;
  }

  std::size_t shift_row(std::span<const TokenId> tokens, std::size_t i) const {
    const std::size_t prev = i == 0 ? shape_.vocab_size : static_cast<std::size_t>(tokens[i - 1]);
    return layout_.shift_emb + prev * shape_.model_dim();
  }

  Matrix mlp(const Matrix& x, const ParamLayout::Layer& ly) const {
    const auto dm = static_cast<Eigen::Index>(shape_.model_dim());
    const auto f = static_cast<Eigen::Index>(shape_.mlp_hidden);
    const Matrix h2 = detail::layer_norm(x, row(ly.ln2_g, dm), row(ly.ln2_b, dm));
    Matrix u = h2 * mat(ly.w1, dm, f);
    u.rowwise() += row(ly.b1, f);
    Matrix m = u.unaryExpr([](double z) { return detail::gelu(z); }) * mat(ly.w2, f, dm);
    m.rowwise() += row(ly.b2, dm);
    return m;
  }

  ModelShape shape_;
  CharVocab vocab_;
  ParamLayout layout_;
  std::vector<double> params_;
};

}  // namespace camelot::lm

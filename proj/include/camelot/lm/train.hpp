#pragma once

#include "camelot/lm/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace camelot::lm {

struct TrainConfig {
  std::size_t steps = 1500;
  double learning_rate = 3e-3;
  std::size_t batch_size = 4;
  std::size_t seq_len = 128;
  std::size_t warmup = 50;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  // Warm-up stage on a separate corpus before the main one (0 skips it).
  std::size_t drill_steps = 1200;
  double drill_learning_rate = 1e-2;
};

/// Progress callback: (step, mean batch loss).
using TrainObserver = std::function<void(std::size_t, double)>;

/// Continues training `model` with Adam from fresh optimizer state.
/// Deterministic given the seed.
inline void fit(TinyLm& model, const std::vector<TokenId>& corpus, const TrainConfig& cfg,
                const TrainObserver& observer = {}) {
  const auto& shape = model.shape();
  if (corpus.size() < 2) throw std::invalid_argument("train_lm: corpus is empty");
  for (auto id : corpus)
    if (id < 0 || static_cast<std::size_t>(id) >= shape.vocab_size)
      throw std::invalid_argument("train_lm: corpus token outside the vocabulary");

  auto& p = model.params();
  std::vector<double> grad(p.size()), m1(p.size(), 0.0), m2(p.size(), 0.0);
  std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
  const std::size_t len = std::min({cfg.seq_len, shape.max_positions, corpus.size()});
  std::uniform_int_distribution<std::size_t> start(0, corpus.size() - len);
  constexpr double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t s = start(rng);
      loss += model.loss_and_grad(std::span(corpus).subspan(s, len), grad, 1.0 / static_cast<double>(cfg.batch_size));
    }
    loss /= static_cast<double>(cfg.batch_size);

    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    gnorm = std::sqrt(gnorm);
    const double clip = gnorm > cfg.grad_clip ? cfg.grad_clip / gnorm : 1.0;

    const double progress = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(1, cfg.steps));
    double lr = cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));
    if (step < cfg.warmup) lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step + 1));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = grad[i] * clip;
      m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
      m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
      p[i] -= lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + eps);
    }
    if (observer) observer(step, loss);
  }
  for (double x : p)
    if (!std::isfinite(x)) throw std::runtime_error("train_lm: training diverged");
}

inline TinyLm train_lm(const ModelShape& shape, const CharVocab& vocab, const std::vector<TokenId>& corpus,
                       const TrainConfig& cfg, const TrainObserver& observer = {}) {
  if (vocab.size() != shape.vocab_size) throw std::invalid_argument("train_lm: vocab size mismatch");
  TinyLm model(shape, vocab);
  model.initialize(cfg.seed);
  fit(model, corpus, cfg, observer);
  return model;
}

/// Two stages: `drill_steps` on `drill` at the drill rate, then `cfg.steps`
/// on `corpus`. The observer sees one continuous step count.
inline TinyLm train_lm(const ModelShape& shape, const CharVocab& vocab, const std::vector<TokenId>& drill,
                       const std::vector<TokenId>& corpus, const TrainConfig& cfg,
                       const TrainObserver& observer = {}) {
  if (vocab.size() != shape.vocab_size) throw std::invalid_argument("train_lm: vocab size mismatch");
  TinyLm model(shape, vocab);
  model.initialize(cfg.seed);
  if (cfg.drill_steps > 0) {
    TrainConfig warm = cfg;
    warm.steps = cfg.drill_steps;
    warm.learning_rate = cfg.drill_learning_rate;
    fit(model, drill, warm, observer);
  }
  TrainConfig main = cfg;
  main.seed = cfg.seed + 1;
  fit(model, corpus, main, [&](std::size_t step, double loss) {
    if (observer) observer(cfg.drill_steps + step, loss);
  });
  return model;
}

inline nlohmann::json model_to_json(const TinyLm& model) {
  const auto& s = model.shape();
  nlohmann::json j;
  j["format"] = "camelot-tiny-lm";
  j["version"] = 1;
  j["shape"] = {{"vocab_size", s.vocab_size}, {"layers", s.layers},       {"heads", s.heads},
                {"head_dim", s.head_dim},     {"max_positions", s.max_positions}, {"mlp_hidden", s.mlp_hidden}, {"token_shift", s.token_shift}};
  std::vector<std::uint32_t> symbols(model.vocab().symbols().begin(), model.vocab().symbols().end());
  j["vocab"] = symbols;
  j["params"] = model.params();
  return j;
}

inline TinyLm model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "camelot-tiny-lm" || j.value("version", 0) != 1)
    throw std::invalid_argument("model file: unrecognised format");
  ModelShape s;
  const auto& js = j.at("shape");
  s.vocab_size = js.at("vocab_size");
  s.layers = js.at("layers");
  s.heads = js.at("heads");
  s.head_dim = js.at("head_dim");
  s.max_positions = js.at("max_positions");
  s.mlp_hidden = js.at("mlp_hidden");
  s.token_shift = js.value("token_shift", false);
  std::vector<char32_t> symbols;
  for (std::uint32_t cp : j.at("vocab").get<std::vector<std::uint32_t>>()) symbols.push_back(cp);
  TinyLm model(s, CharVocab(symbols));
  auto params = j.at("params").get<std::vector<double>>();
  if (params.size() != model.params().size()) throw std::invalid_argument("model file: parameter count mismatch");
  model.params() = std::move(params);
  return model;
}

inline void save_model(const TinyLm& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << model_to_json(model).dump();
}

inline TinyLm load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model file " + path);
  return model_from_json(nlohmann::json::parse(in));
}

}  // namespace camelot::lm

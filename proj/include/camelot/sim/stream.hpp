#pragma once

// Synthetic key/value streams drawn from a phased Gaussian mixture, and the
// replay oracles that check what a memory bank makes of them.

#include "camelot/attention.hpp"
#include "camelot/memory_bank.hpp"
#include "camelot/vector_ops.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace camelot::sim {

struct MixturePhase {
  std::vector<DenseVector> means;
  std::vector<double> weights;
  double sigma = 0.0;
  std::size_t length = 0;
};

/// Phases are played in order. Mode labels are global: phase p's modes are
/// numbered after those of phases 0..p-1.
struct MixtureSpec {
  std::vector<MixturePhase> phases;
  // Value per global mode; empty selects the default distinct-vector rule.
  std::vector<DenseVector> values;
  bool value_noise = false;
  std::uint64_t seed = 0;

  std::size_t dim() const { return phases.empty() || phases[0].means.empty() ? 0 : phases[0].means[0].size(); }

  std::size_t mode_count() const {
    std::size_t n = 0;
    for (const auto& p : phases) n += p.means.size();
    return n;
  }

  std::size_t total_length() const {
    std::size_t n = 0;
    for (const auto& p : phases) n += p.length;
    return n;
  }

  std::size_t first_mode(std::size_t phase) const {
    std::size_t n = 0;
    for (std::size_t p = 0; p < phase; ++p) n += phases[p].means.size();
    return n;
  }

  const DenseVector& mean(std::size_t mode) const {
    for (const auto& p : phases) {
      if (mode < p.means.size()) return p.means[mode];
      mode -= p.means.size();
    }
    throw std::out_of_range("MixtureSpec: mode out of range");
  }

  /// Value attached to a mode: the explicit table, or else (1 + m / d) on
  /// axis m mod d, which is distinct for every mode.
  DenseVector value(std::size_t mode) const {
    if (!values.empty()) return values.at(mode);
    DenseVector v(dim(), 0.0);
    v[mode % dim()] = 1.0 + static_cast<double>(mode / dim());
    return v;
  }

  void validate() const {
    if (phases.empty()) throw std::invalid_argument("MixtureSpec: no phases");
    const std::size_t d = dim();
    if (d == 0) throw std::invalid_argument("MixtureSpec: empty mode means");
    for (const auto& p : phases) {
      if (p.means.empty()) throw std::invalid_argument("MixtureSpec: phase without modes");
      if (p.weights.size() != p.means.size()) throw std::invalid_argument("MixtureSpec: weights/means length mismatch");
      double s = 0.0;
      for (double w : p.weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("MixtureSpec: negative weight");
        s += w;
      }
      if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("MixtureSpec: weights must sum to 1");
      if (!(p.sigma >= 0.0)) throw std::invalid_argument("MixtureSpec: sigma must be non-negative");
      for (const auto& m : p.means)
        if (m.size() != d) throw std::invalid_argument("MixtureSpec: means differ in dimension");
    }
    if (!values.empty()) {
      if (values.size() != mode_count()) throw std::invalid_argument("MixtureSpec: one value per mode required");
      for (const auto& v : values)
        if (v.size() != d) throw std::invalid_argument("MixtureSpec: value dimension mismatch");
    }
  }
};

/// `count` orthonormal axes e_offset .. e_{offset+count-1} in dimension `dim`.
inline std::vector<DenseVector> orthogonal_modes(std::size_t count, std::size_t dim, std::size_t offset = 0) {
  if (offset + count > dim) throw std::invalid_argument("orthogonal_modes: not enough dimensions");
  std::vector<DenseVector> out(count, DenseVector(dim, 0.0));
  for (std::size_t i = 0; i < count; ++i) out[i][offset + i] = 1.0;
  return out;
}

inline std::vector<double> uniform_weights(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

struct StreamSample {
  DenseVector key;
  DenseVector value;
  std::size_t mode = 0;
  std::size_t phase = 0;
};

/// First `n` samples of the stream. Deterministic in the mixture's seed.
inline std::vector<StreamSample> generate_stream(const MixtureSpec& spec, std::size_t n) {
  spec.validate();
  if (n > spec.total_length()) throw std::invalid_argument("generate_stream: n exceeds the total phase length");
  std::mt19937_64 rng(spec.seed);
  std::vector<StreamSample> out;
  out.reserve(n);
  const std::size_t d = spec.dim();
  for (std::size_t p = 0; p < spec.phases.size() && out.size() < n; ++p) {
    const auto& ph = spec.phases[p];
    std::discrete_distribution<std::size_t> pick(ph.weights.begin(), ph.weights.end());
    std::normal_distribution<double> noise(0.0, ph.sigma > 0.0 ? ph.sigma : 1.0);
    for (std::size_t i = 0; i < ph.length && out.size() < n; ++i) {
      StreamSample s;
      const std::size_t local = pick(rng);
      s.mode = spec.first_mode(p) + local;
      s.phase = p;
      s.key = ph.means[local];
      s.value = spec.value(s.mode);
      if (ph.sigma > 0.0) {
        for (std::size_t j = 0; j < d; ++j) s.key[j] += noise(rng);
        if (spec.value_noise)
          for (std::size_t j = 0; j < d; ++j) s.value[j] += noise(rng);
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

struct StreamEvent {
  std::size_t index = 0;   // sample index in the stream
  std::size_t window = 0;
  std::size_t token = 0;   // position within the window
  WriteAction action = WriteAction::insert;
  std::size_t slot = 0;
  double similarity = std::numeric_limits<double>::quiet_NaN();
  std::size_t mode = 0;
  std::size_t phase = 0;
};

struct StreamRun {
  MemoryBank bank;
  std::vector<StreamSample> samples;
  std::vector<StreamEvent> events;
  std::size_t window = 1;
  // Occupied slot keys after each window, kept when requested.
  std::vector<std::map<std::size_t, DenseVector>> window_states;
  std::vector<ReadResult> reads;
};

struct StreamRunOptions {
  bool reads = false;
  bool record_states = false;
  std::optional<std::size_t> samples;  // defaults to the full stream
};

/// Writes the stream into a fresh bank window by window.
inline StreamRun run_memory_on_stream(const MixtureSpec& spec, BankConfig bank_cfg, std::size_t window,
                                      const StreamRunOptions& opts = {}) {
  if (window == 0) throw std::invalid_argument("run_memory_on_stream: window must be positive");
  spec.validate();
  if (bank_cfg.dim == 0) bank_cfg.dim = spec.dim();
  if (bank_cfg.dim != spec.dim()) throw std::invalid_argument("run_memory_on_stream: bank dim differs from stream dim");
  StreamRun run{MemoryBank(bank_cfg), generate_stream(spec, opts.samples.value_or(spec.total_length())), {}, window, {}, {}};
  const std::size_t d = spec.dim();
  for (std::size_t start = 0, w = 0; start < run.samples.size(); start += window, ++w) {
    const std::size_t len = std::min(window, run.samples.size() - start);
    Matrix keys(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(d));
    Matrix values(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        keys(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = run.samples[start + i].key[j];
        values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = run.samples[start + i].value[j];
      }
    if (opts.reads) run.reads.push_back(run.bank.read(keys));
    const auto report = run.bank.write(keys, values);
    for (const auto& t : report.per_token_slot) {
      const auto& s = run.samples[start + t.position];
      run.events.push_back({start + t.position, w, t.position, t.action, t.slot, t.similarity, s.mode, s.phase});
    }
    if (opts.record_states) {
      std::map<std::size_t, DenseVector> state;
      for (std::size_t s = 0; s < run.bank.capacity(); ++s)
        if (run.bank.occupied(s)) state[s] = DenseVector(run.bank.key(s).begin(), run.bank.key(s).end());
      run.window_states.push_back(std::move(state));
    }
  }
  return run;
}

/// Sample indices currently consolidated in each slot, rebuilt from the log.
inline std::map<std::size_t, std::vector<std::size_t>> slot_members(const std::vector<StreamEvent>& events) {
  std::map<std::size_t, std::vector<std::size_t>> members;
  for (const auto& e : events) {
    auto& m = members[e.slot];
    if (e.action != WriteAction::consolidate) m.clear();
    m.push_back(e.index);
  }
  return members;
}

struct RecoveryMetrics {
  std::size_t modes_seen = 0;
  std::size_t recovered = 0;
  double mean_key_error = 0.0;         // slot key vs generating mode mean
  double max_sample_mean_error = 0.0;  // slot key vs per-mode sample mean
  double count_accuracy = 0.0;         // recovered modes whose slot count equals the mode's sample count
  double purity = 1.0;                 // instance-weighted majority-label share
  std::size_t occupied = 0;
  std::uint64_t total_count = 0;
};

inline RecoveryMetrics mode_recovery_metrics(const StreamRun& run, const MixtureSpec& spec) {
  RecoveryMetrics m;
  const auto& bank = run.bank;
  const auto members = slot_members(run.events);
  std::map<std::size_t, std::size_t> majority;  // slot -> label
  std::uint64_t pure = 0, total = 0;
  for (const auto& [slot, idx] : members) {
    if (!bank.occupied(slot)) continue;
    std::map<std::size_t, std::size_t> votes;
    for (auto i : idx) ++votes[run.samples[i].mode];
    const auto best = std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) {
      return a.second < b.second || (a.second == b.second && a.first > b.first);
    });
    majority[slot] = best->first;
    pure += best->second;
    total += idx.size();
  }
  m.purity = total ? static_cast<double>(pure) / static_cast<double>(total) : 1.0;
  m.occupied = bank.occupancy();
  m.total_count = bank.stats().total_count;

  std::map<std::size_t, std::vector<std::size_t>> by_mode;
  for (std::size_t i = 0; i < run.samples.size(); ++i) by_mode[run.samples[i].mode].push_back(i);
  m.modes_seen = by_mode.size();
  const std::size_t d = spec.dim();
  double err_sum = 0.0;
  std::size_t exact_counts = 0;
  for (const auto& [mode, idx] : by_mode) {
    const auto& mu = spec.mean(mode);
    std::optional<std::size_t> nearest;
    double best = 0.0;
    for (std::size_t s = 0; s < bank.capacity(); ++s) {
      if (!bank.occupied(s)) continue;
      const double dist = distance(bank.key(s), mu);
      if (!nearest || dist < best) nearest = s, best = dist;
    }
    if (!nearest || !majority.count(*nearest) || majority.at(*nearest) != mode) continue;
    ++m.recovered;
    err_sum += best;
    DenseVector sample_mean(d, 0.0);
    for (auto i : idx)
      for (std::size_t j = 0; j < d; ++j) sample_mean[j] += run.samples[i].key[j];
    for (auto& x : sample_mean) x /= static_cast<double>(idx.size());
    m.max_sample_mean_error = std::max(m.max_sample_mean_error, distance(bank.key(*nearest), sample_mean));
    if (bank.count(*nearest) == idx.size()) ++exact_counts;
  }
  if (m.recovered) {
    m.mean_key_error = err_sum / static_cast<double>(m.recovered);
    m.count_accuracy = static_cast<double>(exact_counts) / static_cast<double>(m.recovered);
  }
  return m;
}

struct FifoCheck {
  bool pass = true;
  std::optional<std::size_t> divergence_event;
  std::string message;
};

/// Replays the log against a capacity-M first-in-first-out buffer. When the
/// run recorded per-window states, the bank's stored keys are compared with
/// the buffer after every window.
inline FifoCheck fifo_oracle_check(const StreamRun& run, std::size_t capacity) {
  std::deque<std::size_t> fifo;
  std::map<std::size_t, std::size_t> slot_sample;
  std::size_t window_seen = 0;
  auto fail = [](std::size_t at, std::string why) { return FifoCheck{false, at, std::move(why)}; };
  auto compare_window = [&](std::size_t w, std::size_t at) -> std::optional<FifoCheck> {
    if (w >= run.window_states.size()) return std::nullopt;
    std::multiset<DenseVector> want, got;
    for (auto i : fifo) want.insert(run.samples[i].key);
    for (const auto& [slot, key] : run.window_states[w]) got.insert(key);
    if (want != got) return fail(at, "bank contents after window " + std::to_string(w) + " differ from the FIFO buffer");
    return std::nullopt;
  };
  for (std::size_t k = 0; k < run.events.size(); ++k) {
    const auto& e = run.events[k];
    if (e.window != window_seen) {
      if (auto f = compare_window(window_seen, e.index)) return *f;
      window_seen = e.window;
    }
    if (e.action == WriteAction::consolidate)
      return fail(e.index, "sample " + std::to_string(e.index) + " consolidated into slot " + std::to_string(e.slot));
    if (fifo.size() == capacity) {
      if (e.action != WriteAction::replace || slot_sample.at(e.slot) != fifo.front())
        return fail(e.index, "sample " + std::to_string(e.index) + " did not replace the oldest entry (sample " +
                                  std::to_string(fifo.front()) + ")");
      fifo.pop_front();
    } else if (e.action != WriteAction::insert) {
      return fail(e.index, "sample " + std::to_string(e.index) + " evicted while the buffer had room");
    }
    fifo.push_back(e.index);
    slot_sample[e.slot] = e.index;
  }
  if (!run.events.empty())
    if (auto f = compare_window(window_seen, run.events.back().index)) return *f;
  return {};
}

struct AttentionComparison {
  Matrix augmented;
  Matrix full;
  std::vector<double> per_token_deviation;  // max abs difference per query
  double max_deviation = 0.0;
};

/// Memory-augmented attention for `window` (queries = its keys) against exact
/// attention over the full stored history plus the window.
inline AttentionComparison full_attention_oracle(std::span<const StreamSample> history,
                                                 std::span<const StreamSample> window, const MemoryBank& bank,
                                                 double scale) {
  if (history.size() > 4096) throw std::invalid_argument("full_attention_oracle: history exceeds 4096 entries");
  if (window.empty()) throw std::invalid_argument("full_attention_oracle: empty window");
  const auto d = static_cast<Eigen::Index>(window.front().key.size());
  const auto len = static_cast<Eigen::Index>(window.size());
  Matrix keys(len, d), values(len, d);
  for (Eigen::Index i = 0; i < len; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      keys(i, j) = window[static_cast<std::size_t>(i)].key[static_cast<std::size_t>(j)];
      values(i, j) = window[static_cast<std::size_t>(i)].value[static_cast<std::size_t>(j)];
    }
  AttentionComparison out;
  out.augmented = prefix_causal_attention(keys, augment(keys, values, bank.read(keys)), scale);

  const auto h = static_cast<Eigen::Index>(history.size());
  AugmentedKv full;
  full.prefix_len = history.size();
  full.keys.resize(h + len, d);
  full.values.resize(h + len, d);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      full.keys(i, j) = history[static_cast<std::size_t>(i)].key[static_cast<std::size_t>(j)];
      full.values(i, j) = history[static_cast<std::size_t>(i)].value[static_cast<std::size_t>(j)];
    }
  full.keys.bottomRows(len) = keys;
  full.values.bottomRows(len) = values;
  out.full = prefix_causal_attention(keys, full, scale);
  for (Eigen::Index i = 0; i < len; ++i) {
    const double dev = (out.augmented.row(i) - out.full.row(i)).cwiseAbs().maxCoeff();
    out.per_token_deviation.push_back(dev);
    out.max_deviation = std::max(out.max_deviation, dev);
  }
  return out;
}

inline void write_events_csv(std::ostream& os, const std::vector<StreamEvent>& events) {
  os << "event,window,token,action,slot,similarity,mode,phase\n";
  os.precision(17);
  for (const auto& e : events) {
    os << e.index << ',' << e.window << ',' << e.token << ',' << to_string(e.action) << ',' << e.slot << ',';
    if (std::isfinite(e.similarity)) os << e.similarity;
    os << ',' << e.mode << ',' << e.phase << '\n';
  }
}

// JSON form:
//   {"seed": 1, "value_noise": false, "values": [[..], ..],
//    "phases": [{"means": [[..], ..] | {"orthogonal": 3, "dim": 8, "offset": 0},
//                "weights": [..] (default uniform), "sigma": 0.01, "length": 300}]}
inline MixtureSpec mixture_from_json(const nlohmann::json& j) {
  MixtureSpec spec;
  spec.seed = j.value("seed", std::uint64_t{0});
  spec.value_noise = j.value("value_noise", false);
  if (j.contains("values")) spec.values = j.at("values").get<std::vector<DenseVector>>();
  for (const auto& jp : j.at("phases")) {
    MixturePhase p;
    const auto& jm = jp.at("means");
    if (jm.is_object())
      p.means = orthogonal_modes(jm.at("orthogonal").get<std::size_t>(), jm.at("dim").get<std::size_t>(),
                                 jm.value("offset", std::size_t{0}));
    else
      p.means = jm.get<std::vector<DenseVector>>();
    p.weights = jp.contains("weights") ? jp.at("weights").get<std::vector<double>>() : uniform_weights(p.means.size());
    p.sigma = jp.value("sigma", 0.0);
    p.length = jp.at("length").get<std::size_t>();
    spec.phases.push_back(std::move(p));
  }
  spec.validate();
  return spec;
}

inline nlohmann::json to_json(const RecoveryMetrics& m) {
  return {{"modes_seen", m.modes_seen},
          {"recovered", m.recovered},
          {"mean_key_error", m.mean_key_error},
          {"max_sample_mean_error", m.max_sample_mean_error},
          {"count_accuracy", m.count_accuracy},
          {"purity", m.purity},
          {"occupied", m.occupied},
          {"total_count", m.total_count}};
}

}  // namespace camelot::sim

#pragma once

// Consolidated associative memory bank.
//
// A bank holds M slots. Each occupied slot stores the running mean of the
// keys and values routed to it, the number of instances behind that mean,
// and its age in write calls since it was last touched.
//
//   read:  per query key, the occupied slot with maximal similarity
//   write: per token, in order
//            familiar (score >= R)  -> K <- (K_i + c K) / (c + 1), same for V, c <- c + 1
//            novel                  -> lowest free slot, else the oldest slot is replaced
//          then untouched occupied slots age by one

#include "camelot/tensor.hpp"
#include "camelot/vector_ops.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace camelot {

enum class Ablation { full, no_read, no_recency, no_novelty, no_consolidation };

inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_read: return "no-read";
    case Ablation::no_recency: return "no-recency";
    case Ablation::no_novelty: return "no-novelty";
    case Ablation::no_consolidation: return "no-consolidation";
  }
  return "full";
}

inline Ablation parse_ablation(std::string_view name) {
  for (auto a : {Ablation::full, Ablation::no_read, Ablation::no_recency, Ablation::no_novelty,
                 Ablation::no_consolidation})
    if (to_string(a) == name) return a;
  throw std::invalid_argument("unknown ablation: " + std::string(name));
}

struct BankConfig {
  std::size_t capacity = 10000;
  std::size_t dim = 0;
  double threshold = 0.93;
  Similarity similarity = Similarity::cosine;
  Ablation ablation = Ablation::full;
  std::uint64_t seed = 0;
  bool dedupe_reads = false;

  void validate() const {
    if (capacity == 0) throw std::invalid_argument("BankConfig: capacity must be positive");
    if (dim == 0) throw std::invalid_argument("BankConfig: dim must be positive");
    if (!(threshold >= -1.0 && threshold <= 1.0))
      throw std::invalid_argument("BankConfig: threshold must lie in [-1, 1]");
  }

  /// R after the ablation overrides: no-novelty forces -1, no-consolidation +1.
  double effective_threshold() const {
    if (ablation == Ablation::no_novelty) return -1.0;
    if (ablation == Ablation::no_consolidation) return 1.0;
    return threshold;
  }

  /// Minimum score for a token to count as familiar. Euclidean scores are
  /// compared against the chord radius that corresponds to R.
  double acceptance_score() const {
    if (ablation == Ablation::no_novelty) return -std::numeric_limits<double>::infinity();
    const double r = effective_threshold();
    return similarity == Similarity::cosine ? r : -threshold_to_radius(r);
  }

  friend bool operator==(const BankConfig&, const BankConfig&) = default;
};

struct ReadResult {
  Matrix keys;
  Matrix values;
  std::vector<std::size_t> slot_indices;
  std::vector<double> scores;

  std::size_t size() const { return slot_indices.size(); }
  bool empty() const { return slot_indices.empty(); }
};

enum class WriteAction { consolidate, insert, replace };

inline std::string_view to_string(WriteAction a) {
  switch (a) {
    case WriteAction::consolidate: return "consolidate";
    case WriteAction::insert: return "insert";
    case WriteAction::replace: return "replace";
  }
  return "insert";
}

struct TokenAssignment {
  std::size_t position = 0;
  std::size_t slot = 0;
  WriteAction action = WriteAction::insert;
  // Score against the nearest slot before the update; NaN when the bank was empty.
  double similarity = std::numeric_limits<double>::quiet_NaN();
};

struct WriteReport {
  std::size_t consolidated = 0;
  std::size_t novel_inserted = 0;
  std::vector<std::size_t> evicted_slots;
  // Sum of the counts held by evicted slots just before replacement.
  std::uint64_t destroyed_count = 0;
  std::vector<TokenAssignment> per_token_slot;
};

struct BankStats {
  std::size_t capacity = 0;
  std::size_t occupancy = 0;
  std::uint64_t total_count = 0;
  std::map<std::uint64_t, std::size_t> count_histogram;
  std::map<std::uint64_t, std::size_t> age_histogram;
};

/// Raw slot storage. Exposed so snapshots and oracles can inspect and rebuild
/// a bank without friendship.
struct BankState {
  std::vector<double> keys;    // capacity x dim, row-major
  std::vector<double> values;  // capacity x dim, row-major
  std::vector<std::uint64_t> counts;
  std::vector<std::uint64_t> ages;
  // Logical time of the last touch; orders slots of equal age.
  std::vector<std::uint64_t> touched_at;
  std::vector<std::uint8_t> occupied;
  std::uint64_t clock = 0;
  std::mt19937_64 rng;

  friend bool operator==(const BankState&, const BankState&) = default;
};

class MemoryBank {
 public:
  explicit MemoryBank(BankConfig config) : config_(config) {
    config_.validate();
    const std::size_t n = config_.capacity * config_.dim;
    state_.keys.assign(n, 0.0);
    state_.values.assign(n, 0.0);
    state_.counts.assign(config_.capacity, 0);
    state_.ages.assign(config_.capacity, 0);
    state_.touched_at.assign(config_.capacity, 0);
    state_.occupied.assign(config_.capacity, 0);
    state_.rng.seed(config_.seed);
  }

  /// Rebuilds a bank from raw state, checking the slot invariants.
  static MemoryBank from_state(const BankConfig& config, BankState state) {
    MemoryBank bank(config);
    const std::size_t m = config.capacity;
    const std::size_t n = m * config.dim;
    if (state.keys.size() != n || state.values.size() != n || state.counts.size() != m ||
        state.ages.size() != m || state.touched_at.size() != m || state.occupied.size() != m)
      throw std::invalid_argument("MemoryBank: state does not match configuration");
    for (std::size_t i = 0; i < m; ++i) {
      const bool occ = state.occupied[i] != 0;
      if (occ && state.counts[i] == 0)
        throw std::invalid_argument("MemoryBank: occupied slot with zero count");
      if (!occ && (state.counts[i] != 0 || state.ages[i] != 0))
        throw std::invalid_argument("MemoryBank: empty slot with count or age");
    }
    if (!all_finite(state.keys) || !all_finite(state.values))
      throw std::invalid_argument("MemoryBank: non-finite slot contents");
    bank.state_ = std::move(state);
    bank.occupancy_ = static_cast<std::size_t>(
        std::count_if(bank.state_.occupied.begin(), bank.state_.occupied.end(),
                      [](std::uint8_t o) { return o != 0; }));
    return bank;
  }

  const BankConfig& config() const { return config_; }
  const BankState& state() const { return state_; }
  std::size_t capacity() const { return config_.capacity; }
  std::size_t dim() const { return config_.dim; }
  std::size_t occupancy() const { return occupancy_; }
  bool empty() const { return occupancy_ == 0; }

  bool occupied(std::size_t slot) const { return state_.occupied[slot] != 0; }
  std::uint64_t count(std::size_t slot) const { return state_.counts[slot]; }
  std::uint64_t age(std::size_t slot) const { return state_.ages[slot]; }
  std::span<const double> key(std::size_t slot) const {
    return {state_.keys.data() + slot * config_.dim, config_.dim};
  }
  std::span<const double> value(std::size_t slot) const {
    return {state_.values.data() + slot * config_.dim, config_.dim};
  }

  std::optional<SlotMatch> nearest(std::span<const double> query) const {
    return scan_nearest(
        config_.capacity, [this](std::size_t i) { return key(i); },
        [this](std::size_t i) { return occupied(i); }, query, config_.similarity);
  }

  /// Per-token retrieval in token order. Never mutates the bank; the no-read
  /// ablation draws its random slot from a generator keyed on the seed, the
  /// token position and the query bits.
  ReadResult read(const Matrix& queries) const {
    check_dim(queries, "read");
    ReadResult out;
    const auto d = static_cast<Eigen::Index>(config_.dim);
    if (empty() || queries.rows() == 0) {
      out.keys.resize(0, d);
      out.values.resize(0, d);
      return out;
    }
    std::vector<std::size_t> picked;
    std::vector<double> scores;
    picked.reserve(static_cast<std::size_t>(queries.rows()));
    for (Eigen::Index i = 0; i < queries.rows(); ++i) {
      const auto q = row_span(queries, i);
      std::size_t slot = 0;
      double score = 0.0;
      if (config_.ablation == Ablation::no_read) {
        slot = random_occupied_slot(static_cast<std::uint64_t>(i), q);
        score = detail::scan_similarity(key(slot), q, dot(q, q), config_.similarity);
      } else {
        const auto m = nearest(q);
        slot = m->index;
        score = m->score;
      }
      if (config_.dedupe_reads && std::find(picked.begin(), picked.end(), slot) != picked.end())
        continue;
      picked.push_back(slot);
      scores.push_back(score);
    }
    const auto p = static_cast<Eigen::Index>(picked.size());
    out.keys.resize(p, d);
    out.values.resize(p, d);
    for (Eigen::Index r = 0; r < p; ++r) {
      const auto s = picked[static_cast<std::size_t>(r)];
      std::copy_n(key(s).data(), config_.dim, out.keys.data() + r * d);
      std::copy_n(value(s).data(), config_.dim, out.values.data() + r * d);
    }
    out.slot_indices = std::move(picked);
    out.scores = std::move(scores);
    return out;
  }

  /// Consolidates one window of keys/values, strictly left to right.
  WriteReport write(const Matrix& keys, const Matrix& values) {
    check_dim(keys, "write");
    check_dim(values, "write");
    if (keys.rows() != values.rows())
      throw std::invalid_argument("write: keys and values differ in length");
    if (!all_finite({keys.data(), static_cast<std::size_t>(keys.size())}) ||
        !all_finite({values.data(), static_cast<std::size_t>(values.size())}))
      throw std::invalid_argument("write: non-finite input");

    WriteReport report;
    report.per_token_slot.reserve(static_cast<std::size_t>(keys.rows()));
    std::vector<std::uint8_t> touched(config_.capacity, 0);
    const double accept = config_.acceptance_score();

    for (Eigen::Index i = 0; i < keys.rows(); ++i) {
      const auto k = row_span(keys, i);
      const auto v = row_span(values, i);
      TokenAssignment t;
      t.position = static_cast<std::size_t>(i);
      const auto match = nearest(k);
      if (match) t.similarity = match->score;

      if (match && match->score >= accept) {
        consolidate(match->index, k, v);
        t.slot = match->index;
        t.action = WriteAction::consolidate;
        ++report.consolidated;
      } else {
        if (occupancy_ < config_.capacity) {
          t.slot = first_free_slot();
          t.action = WriteAction::insert;
          ++occupancy_;
        } else {
          t.slot = eviction_victim();
          t.action = WriteAction::replace;
          report.evicted_slots.push_back(t.slot);
          report.destroyed_count += state_.counts[t.slot];
        }
        assign(t.slot, k, v);
        ++report.novel_inserted;
      }
      state_.ages[t.slot] = 0;
      state_.touched_at[t.slot] = ++state_.clock;
      touched[t.slot] = 1;
      report.per_token_slot.push_back(t);
    }

    for (std::size_t s = 0; s < config_.capacity; ++s)
      if (occupied(s) && !touched[s]) ++state_.ages[s];
    return report;
  }

  BankStats stats() const {
    BankStats st;
    st.capacity = config_.capacity;
    st.occupancy = occupancy_;
    for (std::size_t s = 0; s < config_.capacity; ++s) {
      if (!occupied(s)) continue;
      st.total_count += state_.counts[s];
      ++st.count_histogram[state_.counts[s]];
      ++st.age_histogram[state_.ages[s]];
    }
    return st;
  }

  friend bool operator==(const MemoryBank& a, const MemoryBank& b) {
    return a.config_ == b.config_ && a.state_ == b.state_ && a.occupancy_ == b.occupancy_;
  }

 private:
  void check_dim(const Matrix& m, const char* op) const {
    if (m.rows() > 0 && static_cast<std::size_t>(m.cols()) != config_.dim)
      throw std::invalid_argument(std::string(op) + ": dimension mismatch");
  }

  std::size_t first_free_slot() const {
    for (std::size_t s = 0; s < config_.capacity; ++s)
      if (!occupied(s)) return s;
    throw std::logic_error("first_free_slot: bank is full");
  }

  std::size_t nth_occupied(std::size_t n) const {
    for (std::size_t s = 0; s < config_.capacity; ++s)
      if (occupied(s) && n-- == 0) return s;
    throw std::logic_error("nth_occupied: out of range");
  }

  // Maximal age; among equal ages the least recently touched; then lowest index.
  std::size_t eviction_victim() {
    if (config_.ablation == Ablation::no_recency) {
      std::uniform_int_distribution<std::size_t> pick(0, occupancy_ - 1);
      return nth_occupied(pick(state_.rng));
    }
    std::size_t best = config_.capacity;
    for (std::size_t s = 0; s < config_.capacity; ++s) {
      if (!occupied(s)) continue;
      if (best == config_.capacity || state_.ages[s] > state_.ages[best] ||
          (state_.ages[s] == state_.ages[best] && state_.touched_at[s] < state_.touched_at[best]))
        best = s;
    }
    return best;
  }

  std::size_t random_occupied_slot(std::uint64_t position, std::span<const double> query) const {
    std::vector<std::uint32_t> words{static_cast<std::uint32_t>(config_.seed),
                                     static_cast<std::uint32_t>(config_.seed >> 32),
                                     static_cast<std::uint32_t>(position),
                                     static_cast<std::uint32_t>(position >> 32)};
    for (double x : query) {
      const auto bits = std::bit_cast<std::uint64_t>(x);
      words.push_back(static_cast<std::uint32_t>(bits));
      words.push_back(static_cast<std::uint32_t>(bits >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    std::mt19937_64 gen(seq);
    std::uniform_int_distribution<std::size_t> pick(0, occupancy_ - 1);
    return nth_occupied(pick(gen));
  }

  void consolidate(std::size_t slot, std::span<const double> k, std::span<const double> v) {
    const double c = static_cast<double>(state_.counts[slot]);
    double* key_row = state_.keys.data() + slot * config_.dim;
    double* value_row = state_.values.data() + slot * config_.dim;
    for (std::size_t j = 0; j < config_.dim; ++j) {
      key_row[j] = (k[j] + c * key_row[j]) / (c + 1.0);
      value_row[j] = (v[j] + c * value_row[j]) / (c + 1.0);
    }
    ++state_.counts[slot];
  }

  void assign(std::size_t slot, std::span<const double> k, std::span<const double> v) {
    std::copy(k.begin(), k.end(), state_.keys.begin() + static_cast<std::ptrdiff_t>(slot * config_.dim));
    std::copy(v.begin(), v.end(), state_.values.begin() + static_cast<std::ptrdiff_t>(slot * config_.dim));
    state_.counts[slot] = 1;
    state_.occupied[slot] = 1;
  }

  BankConfig config_;
  BankState state_;
  std::size_t occupancy_ = 0;
};

/// Incremental form of the consolidation update: x <- x + eps (x_i - x) with
/// eps = 1 / (c + 1).
inline void update_rate_step(std::span<double> mean, std::span<const double> sample, std::uint64_t count) {
  const double eps = 1.0 / (static_cast<double>(count) + 1.0);
  for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += eps * (sample[j] - mean[j]);
}

inline void write_stats_csv(std::ostream& os, const BankStats& st) {
  os << "kind,bucket,slots\n";
  os << "occupancy," << st.capacity << ',' << st.occupancy << '\n';
  os << "total_count,all," << st.total_count << '\n';
  for (const auto& [c, n] : st.count_histogram) os << "count," << c << ',' << n << '\n';
  for (const auto& [a, n] : st.age_histogram) os << "age," << a << ',' << n << '\n';
}

inline void write_slots_csv(std::ostream& os, const MemoryBank& bank) {
  os << "slot,occupied,count,age\n";
  for (std::size_t s = 0; s < bank.capacity(); ++s)
    os << s << ',' << (bank.occupied(s) ? 1 : 0) << ',' << bank.count(s) << ',' << bank.age(s) << '\n';
}

}  // namespace camelot

#include "camelot/memory_bank.hpp"
#include "camelot/slot_log.hpp"
#include "camelot/snapshot.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <deque>
#include <random>
#include <set>

using namespace camelot;

namespace {

BankConfig small_config(std::size_t m = 2, std::size_t d = 2, double r = 0.93) {
  BankConfig c;
  c.capacity = m;
  c.dim = d;
  c.threshold = r;
  return c;
}

MemoryBank bank_with(const BankConfig& cfg, const std::vector<DenseVector>& keys, const std::vector<DenseVector>& values,
                     const std::vector<std::uint64_t>& counts, const std::vector<std::uint64_t>& ages) {
  MemoryBank empty(cfg);
  BankState st = empty.state();
  for (std::size_t s = 0; s < keys.size(); ++s) {
    std::copy(keys[s].begin(), keys[s].end(), st.keys.begin() + static_cast<long>(s * cfg.dim));
    std::copy(values[s].begin(), values[s].end(), st.values.begin() + static_cast<long>(s * cfg.dim));
    st.counts[s] = counts[s];
    st.ages[s] = ages[s];
    st.occupied[s] = 1;
    st.touched_at[s] = s + 1;
  }
  st.clock = keys.size();
  return MemoryBank::from_state(cfg, st);
}

using oracle::InstanceOracle;

void expect_close_rel(std::span<const double> got, const DenseVector& want, double tol) {
  for (std::size_t j = 0; j < want.size(); ++j)
    ASSERT_LE(std::abs(got[j] - want[j]), tol * std::max(1.0, std::abs(want[j])));
}

}  // namespace

TEST(CreateBank, EmptySlots) {
  MemoryBank b(small_config());
  EXPECT_EQ(b.capacity(), 2u);
  EXPECT_EQ(b.occupancy(), 0u);
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_FALSE(b.occupied(s));
    EXPECT_EQ(b.count(s), 0u);
    EXPECT_EQ(b.age(s), 0u);
  }
  auto big = small_config(10000, 16);
  EXPECT_EQ(MemoryBank(big).capacity(), 10000u);
}

TEST(CreateBank, RejectsBadConfig) {
  EXPECT_THROW(MemoryBank(small_config(0, 2)), std::invalid_argument);
  EXPECT_THROW(MemoryBank(small_config(2, 0)), std::invalid_argument);
  EXPECT_THROW(MemoryBank(small_config(2, 2, 1.2)), std::invalid_argument);
}

TEST(Read, ExactMatchAndDuplicates) {
  auto b = bank_with(small_config(), {{1, 0}, {0, 1}}, {{5, 0}, {0, 5}}, {1, 1}, {0, 0});
  auto r = b.read(stack_rows({{1, 0}}));
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r.slot_indices[0], 0u);
  EXPECT_EQ(row_vector(r.keys, 0), (DenseVector{1, 0}));
  EXPECT_EQ(row_vector(r.values, 0), (DenseVector{5, 0}));

  r = b.read(stack_rows({{1, 0}, {1, 0}}));
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r.slot_indices, (std::vector<std::size_t>{0, 0}));

  auto cfg = small_config();
  cfg.dedupe_reads = true;
  auto dedup = bank_with(cfg, {{1, 0}, {0, 1}}, {{5, 0}, {0, 5}}, {1, 1}, {0, 0});
  EXPECT_EQ(dedup.read(stack_rows({{1, 0}, {0, 1}, {1, 0}})).slot_indices, (std::vector<std::size_t>{0, 1}));
}

TEST(Read, EmptyBankGivesEmptyResult) {
  MemoryBank b(small_config());
  auto r = b.read(stack_rows({{1, 0}, {0, 1}}));
  EXPECT_TRUE(r.empty());
  EXPECT_EQ(r.keys.rows(), 0);
  EXPECT_EQ(r.keys.cols(), 2);
}

TEST(Read, RejectsDimensionMismatch) {
  MemoryBank b(small_config());
  EXPECT_THROW(b.read(stack_rows({{1, 0, 0}})), std::invalid_argument);
}

TEST(Write, EmptyBankInserts) {
  MemoryBank b(small_config());
  auto rep = b.write(stack_rows({{1, 0}}), stack_rows({{2, 0}}));
  EXPECT_EQ(rep.novel_inserted, 1u);
  EXPECT_EQ(rep.consolidated, 0u);
  EXPECT_TRUE(b.occupied(0));
  EXPECT_EQ(DenseVector(b.key(0).begin(), b.key(0).end()), (DenseVector{1, 0}));
  EXPECT_EQ(DenseVector(b.value(0).begin(), b.value(0).end()), (DenseVector{2, 0}));
  EXPECT_EQ(b.count(0), 1u);
  EXPECT_EQ(b.age(0), 0u);
}

TEST(Write, ConsolidatesToArithmeticMean) {
  auto b = bank_with(small_config(), {{1, 0}}, {{2, 0}}, {3}, {1});
  auto rep = b.write(stack_rows({{1, 0}}), stack_rows({{0, 2}}));
  EXPECT_EQ(rep.consolidated, 1u);
  // Oracle: mean of the recorded instances {[2,0] x3, [0,2]}.
  const DenseVector want{(2.0 + 2.0 + 2.0 + 0.0) / 4.0, (0.0 + 0.0 + 0.0 + 2.0) / 4.0};
  EXPECT_EQ(want, (DenseVector{1.5, 0.5}));
  expect_close_rel(b.value(0), want, 1e-15);
  EXPECT_EQ(DenseVector(b.key(0).begin(), b.key(0).end()), (DenseVector{1, 0}));
  EXPECT_EQ(b.count(0), 4u);
  EXPECT_EQ(b.age(0), 0u);
}

TEST(Write, FullBankEvictsOldest) {
  auto b = bank_with(small_config(), {{1, 0}, {0, 1}}, {{1, 1}, {2, 2}}, {5, 2}, {3, 1});
  auto rep = b.write(stack_rows({{-1, 0}}), stack_rows({{9, 9}}));
  ASSERT_EQ(rep.evicted_slots, (std::vector<std::size_t>{0}));
  EXPECT_EQ(rep.destroyed_count, 5u);
  EXPECT_EQ(b.count(0), 1u);
  EXPECT_EQ(b.age(0), 0u);
  EXPECT_EQ(b.age(1), 2u);
  EXPECT_EQ(DenseVector(b.key(0).begin(), b.key(0).end()), (DenseVector{-1, 0}));
}

TEST(Write, EqualityCountsAsFamiliar) {
  auto cfg = small_config(2, 2, 1.0);
  MemoryBank b(cfg);
  b.write(stack_rows({{3, 4}}), stack_rows({{1, 1}}));
  auto rep = b.write(stack_rows({{3, 4}}), stack_rows({{3, 3}}));
  EXPECT_EQ(rep.consolidated, 1u);
  EXPECT_EQ(b.count(0), 2u);
}

TEST(Write, SameWindowTokensCanConsolidate) {
  MemoryBank b(small_config(4, 2));
  auto rep = b.write(stack_rows({{1, 0}, {1, 0.01}, {0, 1}}), stack_rows({{1, 0}, {3, 0}, {0, 1}}));
  EXPECT_EQ(rep.per_token_slot[1].action, WriteAction::consolidate);
  EXPECT_EQ(rep.per_token_slot[1].slot, 0u);
  EXPECT_EQ(rep.per_token_slot[2].slot, 1u);
  EXPECT_DOUBLE_EQ(b.value(0)[0], 2.0);
}

TEST(Write, RejectsMismatchedInput) {
  MemoryBank b(small_config());
  EXPECT_THROW(b.write(stack_rows({{1, 0}}), stack_rows({{1, 0}, {0, 1}})), std::invalid_argument);
  EXPECT_THROW(b.write(stack_rows({{1, 0, 0}}), stack_rows({{1, 0, 0}})), std::invalid_argument);
  EXPECT_THROW(b.write(stack_rows({{1, std::nan("")}}), stack_rows({{1, 0}})), std::invalid_argument);
}

TEST(Stats, OccupancyAndTotals) {
  MemoryBank b(small_config());
  EXPECT_EQ(b.stats().occupancy, 0u);
  auto c = bank_with(small_config(), {{1, 0}, {0, 1}}, {{1, 1}, {2, 2}}, {4, 1}, {0, 0});
  const auto st = c.stats();
  EXPECT_EQ(st.total_count, 5u);
  EXPECT_EQ(st.count_histogram.at(4), 1u);
  EXPECT_EQ(st.count_histogram.at(1), 1u);
}

TEST(Stats, MatchReplayedEventLog) {
  MemoryBank b(small_config());
  std::vector<WriteReport> log;
  log.push_back(b.write(stack_rows({{1, 0}}), stack_rows({{2, 0}})));
  log.push_back(b.write(stack_rows({{1, 0}}), stack_rows({{0, 2}})));
  log.push_back(b.write(stack_rows({{0, 1}, {-1, 0}, {0, -1}}), stack_rows({{1, 1}, {2, 2}, {3, 3}})));
  // Replay: occupancy = slots ever created (capped by M); sum of counts =
  // tokens written minus counts destroyed by eviction.
  std::set<std::size_t> seen;
  std::uint64_t tokens = 0, destroyed = 0;
  for (const auto& r : log) {
    for (const auto& t : r.per_token_slot) seen.insert(t.slot);
    tokens += r.per_token_slot.size();
    destroyed += r.destroyed_count;
  }
  EXPECT_EQ(b.stats().occupancy, seen.size());
  EXPECT_EQ(b.stats().total_count, tokens - destroyed);
}

TEST(SlotLog, TracksAssignments) {
  MemoryBank b(small_config(8, 2));
  SlotLog log(8);
  auto rep = b.write(stack_rows({{1, 0}, {1, 0.01}}), stack_rows({{0, 0}, {0, 0}}));
  log.record(rep, {"he", "she"});
  EXPECT_EQ(log.labels(0), (std::vector<std::string>{"he", "she"}));
  EXPECT_TRUE(log.history(3).empty());
  EXPECT_THROW(log.record(rep, {"only-one"}), std::invalid_argument);
}

TEST(SlotLog, EvictionRestartsHistory) {
  MemoryBank b(small_config(1, 2));
  SlotLog log(1);
  log.record(b.write(stack_rows({{1, 0}}), stack_rows({{0, 0}})), {"old"});
  log.record(b.write(stack_rows({{0, 1}}), stack_rows({{0, 0}})), {"new"});
  EXPECT_EQ(log.labels(0), (std::vector<std::string>{"new"}));
  std::ostringstream csv;
  log.write_csv(csv);
  EXPECT_EQ(csv.str(), "slot,order,label,action\n0,0,new,replace\n");
}

TEST(ReadPurity, ReadNeverMutates) {
  for (auto abl : {Ablation::full, Ablation::no_read}) {
    auto cfg = small_config(16, 4, 0.5);
    cfg.ablation = abl;
    cfg.seed = 9;
    MemoryBank b(cfg);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n;
    for (int w = 0; w < 20; ++w) {
      Matrix k(5, 4), v(5, 4);
      for (int i = 0; i < k.size(); ++i) k.data()[i] = n(rng), v.data()[i] = n(rng);
      const auto before = snapshot(b);
      b.read(k);
      ASSERT_EQ(before, snapshot(b));
      b.write(k, v);
    }
  }
}

// >= 10,000 write events against the instance-recording oracle.
TEST(Invariants, MeanCountAgeAndEviction) {
  constexpr std::size_t kM = 12, kD = 8;
  BankConfig cfg = small_config(kM, kD, 0.93);
  MemoryBank bank(cfg);
  InstanceOracle oracle(kM, kD);
  std::mt19937_64 rng(77);
  std::normal_distribution<double> n(0.0, 1.0);

  std::vector<DenseVector> centers(60, DenseVector(kD));
  for (auto& c : centers)
    for (auto& x : c) x = n(rng);

  std::uint64_t events = 0, destroyed = 0, consolidations = 0, evictions = 0;
  int call = 0;
  while (events < 12000) {
    const std::size_t len = 1 + rng() % 16;
    // Topic drifts slowly through the center list.
    const std::size_t base = (static_cast<std::size_t>(call++) / 40) % 50;
    Matrix keys(static_cast<long>(len), kD), values(static_cast<long>(len), kD);
    for (std::size_t i = 0; i < len; ++i) {
      const auto& c = centers[base + rng() % 10];
      for (std::size_t j = 0; j < kD; ++j) {
        keys(static_cast<long>(i), static_cast<long>(j)) = c[j] + 0.3 * n(rng);
        values(static_cast<long>(i), static_cast<long>(j)) = n(rng);
      }
    }

    std::vector<std::uint64_t> ages_before(kM);
    for (std::size_t s = 0; s < kM; ++s) ages_before[s] = bank.age(s);

    // Decision oracle per token, replayed against the oracle's own means.
    const auto rep = bank.write(keys, values);
    ASSERT_EQ(rep.consolidated + rep.novel_inserted, len);
    std::set<std::size_t> touched;
    for (const auto& t : rep.per_token_slot) {
      const auto k = row_span(keys, static_cast<long>(t.position));
      const auto v = row_span(values, static_cast<long>(t.position));
      std::size_t arg = kM;
      double best = 0.0;
      for (std::size_t s = 0; s < kM; ++s) {
        if (!oracle.slot(s).occupied) continue;
        const double sim = similarity(oracle.mean_key(s), k, Similarity::cosine);
        if (arg == kM || sim > best) arg = s, best = sim;
      }
      const bool near_tie = arg != kM && std::abs(best - 0.93) < 1e-9;
      if (t.action == WriteAction::consolidate) {
        if (!near_tie) {
          ASSERT_GE(best, 0.93);
        }
        ASSERT_EQ(t.slot, arg);
        oracle.add(t.slot, k, v);
        ++consolidations;
      } else {
        if (!near_tie) {
          ASSERT_TRUE(arg == kM || best < 0.93);
        }
        if (t.action == WriteAction::insert) {
          ASSERT_FALSE(oracle.slot(t.slot).occupied);
          for (std::size_t s = 0; s < t.slot; ++s) ASSERT_TRUE(oracle.slot(s).occupied);
        } else {
          ASSERT_EQ(oracle.occupancy(), kM) << "eviction with a free slot";
          const auto victim_age = oracle.slot(t.slot).age;
          for (std::size_t s = 0; s < kM; ++s) ASSERT_LE(oracle.slot(s).age, victim_age);
          destroyed += oracle.slot(t.slot).count;
          ++evictions;
        }
        oracle.reset_slot(t.slot, k, v);
      }
      touched.insert(t.slot);
      ++events;
    }
    oracle.tick(touched);

    for (std::size_t s = 0; s < kM; ++s) {
      ASSERT_EQ(bank.occupied(s), oracle.slot(s).occupied);
      if (!bank.occupied(s)) continue;
      ASSERT_EQ(bank.count(s), oracle.slot(s).count);
      ASSERT_EQ(bank.age(s), touched.count(s) ? 0u : ages_before[s] + 1);
      ASSERT_EQ(bank.age(s), oracle.slot(s).age);
      expect_close_rel(bank.key(s), oracle.mean_key(s), 1e-9);
      expect_close_rel(bank.value(s), oracle.mean_value(s), 1e-9);
    }
    ASSERT_EQ(bank.stats().total_count + destroyed, events);
  }
  EXPECT_GT(consolidations, 1000u);
  EXPECT_GT(evictions, 100u);
}

TEST(Invariants, UpdateRateMatchesClosedForm) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int chain = 0; chain < 1000; ++chain) {
    const std::size_t d = 1 + rng() % 32;
    const std::size_t len = 2 + rng() % 64;
    DenseVector closed(d), incremental(d);
    for (std::size_t j = 0; j < d; ++j) closed[j] = incremental[j] = n(rng);
    for (std::uint64_t c = 1; c < len; ++c) {
      DenseVector x(d);
      for (auto& e : x) e = n(rng);
      for (std::size_t j = 0; j < d; ++j)
        closed[j] = (x[j] + static_cast<double>(c) * closed[j]) / (static_cast<double>(c) + 1.0);
      update_rate_step(incremental, x, c);
    }
    for (std::size_t j = 0; j < d; ++j) ASSERT_NEAR(closed[j], incremental[j], 1e-12);
  }
}

TEST(Ablation, NoConsolidationIsFifo) {
  for (std::size_t window : {1u, 3u, 4u, 7u}) {
    auto cfg = small_config(4, 6, 0.0);
    cfg.ablation = Ablation::no_consolidation;
    MemoryBank b(cfg);
    std::mt19937_64 rng(window);
    std::normal_distribution<double> n;
    std::deque<DenseVector> fifo;
    for (int w = 0; w < 30; ++w) {
      Matrix k(static_cast<long>(window), 6);
      for (int i = 0; i < k.size(); ++i) k.data()[i] = n(rng);
      b.write(k, k);
      for (long i = 0; i < k.rows(); ++i) {
        fifo.push_back(row_vector(k, i));
        if (fifo.size() > 4) fifo.pop_front();
      }
      std::multiset<DenseVector> stored, want(fifo.begin(), fifo.end());
      for (std::size_t s = 0; s < 4; ++s)
        if (b.occupied(s)) stored.insert(DenseVector(b.key(s).begin(), b.key(s).end()));
      ASSERT_EQ(stored, want) << "window " << window << " call " << w;
    }
  }
}

TEST(Ablation, NoNoveltyNeverEvicts) {
  auto cfg = small_config(8, 4, 0.93);
  cfg.ablation = Ablation::no_novelty;
  MemoryBank b(cfg);
  EXPECT_EQ(cfg.effective_threshold(), -1.0);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::size_t first_occupancy = 0;
  for (int w = 0; w < 100; ++w) {
    Matrix k(5, 4);
    for (int i = 0; i < k.size(); ++i) k.data()[i] = n(rng);
    const auto rep = b.write(k, k);
    EXPECT_TRUE(rep.evicted_slots.empty());
    if (w == 0) first_occupancy = b.occupancy();
    EXPECT_EQ(b.occupancy(), first_occupancy);
  }
  EXPECT_EQ(first_occupancy, 1u);
}

TEST(Ablation, NoNoveltyWithEuclideanAcceptsEverything) {
  auto cfg = small_config(8, 2, 0.93);
  cfg.ablation = Ablation::no_novelty;
  cfg.similarity = Similarity::negative_euclidean;
  MemoryBank b(cfg);
  b.write(stack_rows({{0, 0}, {100, 100}, {-50, 3}}), stack_rows({{0, 0}, {1, 1}, {2, 2}}));
  EXPECT_EQ(b.occupancy(), 1u);
  EXPECT_EQ(b.count(0), 3u);
}

TEST(Ablation, RandomVariantsAreSeedDeterministic) {
  for (auto abl : {Ablation::no_read, Ablation::no_recency}) {
    auto run = [&](std::uint64_t seed) {
      auto cfg = small_config(6, 3, 0.9);
      cfg.ablation = abl;
      cfg.seed = seed;
      MemoryBank b(cfg);
      std::mt19937_64 rng(42);
      std::normal_distribution<double> n;
      std::vector<std::size_t> reads;
      for (int w = 0; w < 50; ++w) {
        Matrix k(4, 3);
        for (int i = 0; i < k.size(); ++i) k.data()[i] = n(rng);
        const auto r = b.read(k);
        reads.insert(reads.end(), r.slot_indices.begin(), r.slot_indices.end());
        b.write(k, k);
      }
      return std::make_pair(snapshot(b), reads);
    };
    EXPECT_EQ(run(1), run(1));
    EXPECT_NE(run(1), run(2));
  }
}

TEST(Ablation, NoReadIsUniformOverOccupied) {
  auto cfg = small_config(4, 2, 0.99);
  cfg.ablation = Ablation::no_read;
  cfg.seed = 17;
  auto b = MemoryBank(cfg);
  b.write(stack_rows({{1, 0}, {0, 1}, {-1, 0}}), stack_rows({{1, 0}, {0, 1}, {-1, 0}}));
  std::vector<int> hits(4, 0);
  Matrix q(3000, 2);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  for (int i = 0; i < q.size(); ++i) q.data()[i] = n(rng);
  for (auto s : b.read(q).slot_indices) ++hits[s];
  EXPECT_EQ(hits[3], 0);
  for (int s = 0; s < 3; ++s) EXPECT_NEAR(hits[s], 1000, 120);
}

TEST(Ablation, NoRecencyReplacesRandomSlots) {
  auto cfg = small_config(4, 2, 0.999);
  cfg.ablation = Ablation::no_recency;
  cfg.seed = 4;
  MemoryBank b(cfg);
  std::set<std::size_t> victims;
  for (int w = 0; w < 60; ++w) {
    const double a = 0.1 * w;
    const auto rep = b.write(stack_rows({{std::cos(a), std::sin(a)}}), stack_rows({{0, 0}}));
    victims.insert(rep.evicted_slots.begin(), rep.evicted_slots.end());
  }
  EXPECT_EQ(victims.size(), 4u);
}

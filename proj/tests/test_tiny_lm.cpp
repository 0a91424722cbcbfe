#include "camelot/lm/corpus.hpp"
#include "camelot/lm/eval.hpp"
#include "camelot/lm/train.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace camelot;
using namespace camelot::lm;

namespace {

ModelShape small_shape(std::size_t vocab) {
  ModelShape s;
  s.vocab_size = vocab;
  s.layers = 2;
  s.heads = 2;
  s.head_dim = 4;
  s.max_positions = 32;
  s.mlp_hidden = 16;
  return s;
}

TinyLm random_model(std::uint64_t seed = 3) {
  auto vocab = CharVocab::from_text(PseudoLanguage::alphabet());
  TinyLm m(small_shape(vocab.size()), vocab);
  m.initialize(seed);
  return m;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng() % vocab);
  return t;
}

MemoryConfig memory(std::size_t window, std::vector<std::size_t> layers, std::size_t capacity = 64) {
  MemoryConfig mc;
  mc.window = window;
  mc.augmented_layers = std::move(layers);
  mc.bank.capacity = capacity;
  mc.bank.threshold = 0.9;
  return mc;
}

}  // namespace

TEST(Vocab, RoundTripAndErrors) {
  const auto v = CharVocab::from_text("héllo wörld");
  EXPECT_EQ(v.size(), 9u);
  const auto ids = v.encode("wörld");
  EXPECT_EQ(v.decode(ids), "wörld");
  EXPECT_THROW(v.encode("xyz"), std::out_of_range);
  EXPECT_THROW(utf8_decode(std::string("\xc3")), std::invalid_argument);
}

TEST(Gradient, MatchesFiniteDifferences) {
  auto m = random_model(5);
  const auto toks = random_tokens(14, m.shape().vocab_size, 9);
  std::vector<double> g;
  m.loss_and_grad(toks, g);
  auto& p = m.params();
  ASSERT_EQ(g.size(), p.size());
  const double h = 1e-5;
  std::vector<double> scratch;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double up = m.loss_and_grad(toks, scratch);
    p[i] = orig - h;
    const double down = m.loss_and_grad(toks, scratch);
    p[i] = orig;
    const double fd = (up - down) / (2.0 * h);
    ASSERT_NEAR(g[i], fd, 1e-7 + 1e-5 * std::abs(fd)) << "parameter " << i;
    ++checked;
  }
  EXPECT_EQ(checked, m.layout().total);
}

TEST(Gradient, LossMatchesInferencePath) {
  const auto m = random_model(8);
  const auto toks = random_tokens(30, m.shape().vocab_size, 2);
  std::vector<double> g;
  EXPECT_NEAR(m.loss_and_grad(toks, g), m.mean_nll(toks), 1e-12);
}

TEST(Training, DeterministicAndLearns) {
  const auto text = synthetic_training_text(6000, 4);
  const auto vocab = CharVocab::from_text(text);
  const auto ids = vocab.encode(text);
  auto shape = small_shape(vocab.size());
  TrainConfig tc;
  tc.steps = 150;
  tc.seq_len = 32;
  tc.warmup = 10;
  tc.learning_rate = 1e-2;
  tc.seed = 11;
  const auto a = train_lm(shape, vocab, ids, tc);
  const auto b = train_lm(shape, vocab, ids, tc);
  EXPECT_EQ(a.params(), b.params());
  for (double x : a.params()) ASSERT_TRUE(std::isfinite(x));
  tc.seed = 12;
  EXPECT_NE(train_lm(shape, vocab, ids, tc).params(), a.params());

  const auto held_out = vocab.encode(PseudoLanguage().text(32, 99, false));
  EXPECT_LT(a.mean_nll(held_out), std::log(static_cast<double>(vocab.size())));
}

TEST(Training, TwoStageDeterministicWithContinuousSteps) {
  const auto text = synthetic_training_text(4000, 2);
  const auto vocab = CharVocab::from_text(text);
  const auto shape = small_shape(vocab.size());
  const auto drill = vocab.encode(copy_drill_text(3000, 5));
  TrainConfig tc;
  tc.steps = 20;
  tc.drill_steps = 15;
  tc.seq_len = 32;
  tc.warmup = 5;
  std::vector<std::size_t> steps;
  const auto a = train_lm(shape, vocab, drill, vocab.encode(text), tc, [&](std::size_t s, double) { steps.push_back(s); });
  ASSERT_EQ(steps.size(), 35u);
  for (std::size_t i = 0; i < steps.size(); ++i) EXPECT_EQ(steps[i], i);
  EXPECT_EQ(train_lm(shape, vocab, drill, vocab.encode(text), tc).params(), a.params());
  tc.drill_steps = 0;
  EXPECT_NE(train_lm(shape, vocab, drill, vocab.encode(text), tc).params(), a.params());
}

TEST(Training, RejectsMismatchedInputs) {
  const auto vocab = CharVocab::from_text("abc");
  auto shape = small_shape(4);
  EXPECT_THROW(train_lm(shape, vocab, {0, 1, 2}, {}), std::invalid_argument);
  shape.vocab_size = 3;
  EXPECT_THROW(train_lm(shape, vocab, {0, 1, 7}, {}), std::invalid_argument);
  EXPECT_THROW(train_lm(shape, vocab, {0}, {}), std::invalid_argument);
}

TEST(Training, ModelJsonRoundTrip) {
  const auto m = random_model(2);
  const auto back = model_from_json(model_to_json(m));
  EXPECT_EQ(back.params(), m.params());
  EXPECT_EQ(back.shape(), m.shape());
  EXPECT_EQ(back.vocab().symbols(), m.vocab().symbols());
  auto j = model_to_json(m);
  j["params"].erase(0);
  EXPECT_THROW(model_from_json(j), std::invalid_argument);
}

TEST(ClmProtocol, EmptyMemoryIdentity) {
  const auto m = random_model(7);
  const auto doc = random_tokens(16 * 10, m.shape().vocab_size, 1);
  auto mc = memory(16, {0, 1});
  mc.write = false;
  BankSet banks(m.shape(), mc);
  const auto aug = eval_clm(m, doc, mc, &banks);
  const auto plain = eval_plain(m, doc, 16);
  ASSERT_EQ(aug.per_window.size(), 10u);
  ASSERT_EQ(aug.token_scores.size(), plain.token_scores.size());
  for (std::size_t i = 0; i < aug.token_scores.size(); ++i)
    EXPECT_NEAR(aug.token_scores[i].nll, plain.token_scores[i].nll, 1e-9);
  EXPECT_EQ(banks.total_count(), 0u);
}

TEST(ClmProtocol, SingleWindowEqualsPlain) {
  const auto m = random_model(7);
  const auto doc = random_tokens(20, m.shape().vocab_size, 4);
  const auto aug = eval_clm(m, doc, memory(32, {0, 1}));
  EXPECT_NEAR(aug.perplexity, std::exp(m.mean_nll(doc)), 1e-9);
}

TEST(ClmProtocol, ReadAugmentWriteOrder) {
  const auto m = random_model(7);
  const auto doc = random_tokens(8 * 4 + 3, m.shape().vocab_size, 5);
  const auto mc = memory(8, {1, 0});
  BankSet banks(m.shape(), mc);
  banks.tracing = true;
  eval_clm(m, doc, mc, &banks);
  // Expected: per window, per layer ascending: reads for every head, then writes.
  std::vector<ProtocolEvent> want;
  for (std::size_t w = 0; w < 5; ++w)
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t h = 0; h < 2; ++h) want.push_back({w, l, h, ProtocolOp::read, w == 0 ? 0u : (w == 4 ? 3u : 8u)});
      for (std::size_t h = 0; h < 2; ++h) want.push_back({w, l, h, ProtocolOp::write, 0});
    }
  ASSERT_EQ(banks.trace.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    const auto& a = banks.trace[i];
    EXPECT_EQ(a.window, want[i].window) << i;
    EXPECT_EQ(a.layer, want[i].layer) << i;
    EXPECT_EQ(a.head, want[i].head) << i;
    EXPECT_EQ(a.op, want[i].op) << i;
    EXPECT_EQ(a.retrieved, want[i].retrieved) << i;
  }
}

TEST(ClmProtocol, CountGrowthMatchesEventLog) {
  const auto m = random_model(9);
  const auto doc = random_tokens(12 * 12, m.shape().vocab_size, 6);
  auto mc = memory(12, {0, 1}, 16);
  BankSet banks(m.shape(), mc);
  std::uint64_t written = 0;
  for (std::size_t w = 0; w < 12; ++w) {
    process_window_clm(m, banks, std::span(doc).subspan(w * 12, 12), w);
    written += 12 * banks.augmented_heads();
    EXPECT_EQ(banks.written_tokens(), written);
    EXPECT_EQ(banks.total_count(), written - banks.destroyed_count()) << "window " << w;
  }
  EXPECT_GT(banks.destroyed_count(), 0u);
}

TEST(ClmProtocol, AggregationIdentity) {
  const auto m = random_model(4);
  const auto doc = random_tokens(100, m.shape().vocab_size, 8);
  const auto r = eval_clm(m, doc, memory(16, {1}));
  double weighted = 0.0;
  std::size_t n = 0;
  for (const auto& w : r.per_window) {
    weighted += w.nll * static_cast<double>(w.targets);
    n += w.targets;
  }
  EXPECT_EQ(n, r.targets);
  EXPECT_NEAR(std::exp(weighted / static_cast<double>(n)), r.perplexity, 1e-9);
  EXPECT_GE(r.perplexity, 1.0);
  EXPECT_EQ(r.per_window.back().tokens, 4u);
}

TEST(ClmProtocol, UniformLogitsGivePerplexityOfVocab) {
  std::string sym = "abcdefghijklmnop";
  const auto vocab = CharVocab::from_text(sym);
  ASSERT_EQ(vocab.size(), 16u);
  TinyLm m(small_shape(16), vocab);  // all-zero parameters: logits are zero
  const auto doc = random_tokens(90, 16, 3);
  EXPECT_NEAR(eval_plain(m, doc, 16).perplexity, 16.0, 1e-12);
  for (auto ab : {Ablation::full, Ablation::no_read, Ablation::no_recency})
    for (auto layers : std::vector<std::vector<std::size_t>>{{0}, {0, 1}}) {
      auto mc = memory(16, layers, 8);
      mc.bank.ablation = ab;
      EXPECT_NEAR(eval_clm(m, doc, mc).perplexity, 16.0, 1e-12);
    }
}

TEST(ClmProtocol, DocumentsAreIsolated) {
  const auto m = random_model(6);
  const std::vector<std::vector<TokenId>> docs{random_tokens(50, m.shape().vocab_size, 1),
                                               random_tokens(40, m.shape().vocab_size, 2)};
  const auto mc = memory(16, {0, 1});
  const auto joint = eval_clm_documents(m, docs, mc);
  std::vector<TokenScore> sep;
  for (const auto& d : docs) {
    const auto r = eval_clm(m, d, mc);
    sep.insert(sep.end(), r.token_scores.begin(), r.token_scores.end());
  }
  ASSERT_EQ(sep.size(), joint.token_scores.size());
  for (std::size_t i = 0; i < sep.size(); ++i) EXPECT_EQ(sep[i].nll, joint.token_scores[i].nll);

  auto carry = mc;
  carry.reset_per_document = false;
  const auto shared = eval_clm_documents(m, docs, carry);
  EXPECT_NE(shared.token_scores.back().nll, joint.token_scores.back().nll);
}

TEST(ClmProtocol, RejectsBadConfig) {
  const auto m = random_model(6);
  const std::vector<TokenId> doc{1, 2, 3};
  EXPECT_THROW(eval_clm(m, doc, memory(64, {0})), std::invalid_argument);
  EXPECT_THROW(eval_clm(m, doc, memory(8, {2})), std::invalid_argument);
  EXPECT_THROW(eval_clm(m, std::vector<TokenId>{1}, memory(8, {0})), std::invalid_argument);
  EXPECT_THROW(eval_clm(m, std::vector<TokenId>{1, 99}, memory(8, {0})), std::out_of_range);
}

TEST(IclProtocol, EmptyBanksMatchPlainScoring) {
  const auto m = random_model(10);
  const auto q = random_tokens(6, m.shape().vocab_size, 1);
  const std::vector<std::vector<TokenId>> opts{random_tokens(3, m.shape().vocab_size, 2),
                                               random_tokens(3, m.shape().vocab_size, 3),
                                               random_tokens(3, m.shape().vocab_size, 4)};
  const auto r = eval_icl(m, memory(16, {0, 1}), {}, q, opts);
  std::size_t best = 0;
  for (std::size_t o = 0; o < opts.size(); ++o) {
    auto seq = q;
    seq.insert(seq.end(), opts[o].begin(), opts[o].end());
    const auto w = plain_window(m, seq);
    double s = 0.0;
    for (std::size_t i = q.size() - 1; i < w.token_nll.size(); ++i) s += w.token_nll[i];
    const double ppl = std::exp(s / static_cast<double>(opts[o].size()));
    EXPECT_NEAR(r.option_perplexity[o], ppl, 1e-9);
    if (ppl < r.option_perplexity[best]) best = o;
  }
  EXPECT_EQ(r.chosen, best);
}

TEST(IclProtocol, IdenticalOptionsPickFirst) {
  const auto m = random_model(10);
  const auto q = random_tokens(5, m.shape().vocab_size, 1);
  const auto opt = random_tokens(4, m.shape().vocab_size, 2);
  const std::vector<std::vector<TokenId>> ex{random_tokens(20, m.shape().vocab_size, 3)};
  const auto r = eval_icl(m, memory(8, {0, 1}), ex, q, {opt, opt, opt});
  EXPECT_EQ(r.chosen, 0u);
  EXPECT_EQ(r.option_perplexity[0], r.option_perplexity[2]);
}

TEST(IclProtocol, PrefillIsWriteOnly) {
  const auto m = random_model(10);
  const std::vector<std::vector<TokenId>> ex{random_tokens(20, m.shape().vocab_size, 3),
                                             random_tokens(9, m.shape().vocab_size, 4)};
  const auto mc = memory(8, {0, 1});
  BankSet prefill(m.shape(), mc);
  prefill.tracing = true;
  const auto q = random_tokens(5, m.shape().vocab_size, 1);
  const auto with = eval_icl(m, mc, ex, q, {random_tokens(3, m.shape().vocab_size, 8)}, &prefill);
  ASSERT_FALSE(prefill.trace.empty());
  for (const auto& e : prefill.trace) EXPECT_EQ(e.op, ProtocolOp::write);
  EXPECT_EQ(prefill.written_tokens(), (20u + 9u) * prefill.augmented_heads());
  // The prefilled memory changes the option scores.
  const auto without = eval_icl(m, mc, {}, q, {random_tokens(3, m.shape().vocab_size, 8)});
  EXPECT_NE(with.option_perplexity[0], without.option_perplexity[0]);
}

TEST(FrequencyBuckets, DefaultEdgesAndRecombination) {
  std::map<TokenId, std::uint64_t> freq{{0, 50}, {1, 500}, {2, 5000}, {3, 50000}};
  std::vector<TokenScore> scores{{0, 1.0}, {1, 2.0}, {2, 0.5}, {3, 0.25}, {3, 0.75}, {4, 3.0}};
  const auto b = freq_bucket_report(scores, freq);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0].label, ">=10000");
  EXPECT_EQ(b[1].label, "1000-10000");
  EXPECT_EQ(b[2].label, "100-1000");
  EXPECT_EQ(b[3].label, "<100");
  EXPECT_EQ(b[0].tokens, 2u);
  EXPECT_EQ(b[3].tokens, 2u);  // unseen token 4 lands in the rarest bucket
  EXPECT_NEAR(b[0].perplexity, std::exp(0.5), 1e-12);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& x : b) {
    total += x.mean_nll * static_cast<double>(x.tokens);
    n += x.tokens;
  }
  EXPECT_EQ(n, scores.size());
  EXPECT_NEAR(total / static_cast<double>(n), 7.5 / 6.0, 1e-12);
}

TEST(FrequencyBuckets, SingleAndTwoBuckets) {
  std::map<TokenId, std::uint64_t> freq{{0, 3}, {1, 30}};
  std::vector<TokenScore> scores{{0, 1.0}, {1, 2.0}, {1, 4.0}};
  const auto one = freq_bucket_report(scores, freq, {});
  ASSERT_EQ(one.size(), 1u);
  EXPECT_NEAR(one[0].perplexity, std::exp(7.0 / 3.0), 1e-12);
  const auto two = freq_bucket_report(scores, freq, {10});
  ASSERT_EQ(two.size(), 2u);
  EXPECT_NEAR((two[0].mean_nll * 2 + two[1].mean_nll * 1) / 3.0, one[0].mean_nll, 1e-12);
  const auto empty_bucket = freq_bucket_report(scores, freq, {10, 1000});
  EXPECT_EQ(empty_bucket[0].tokens, 0u);
  EXPECT_TRUE(std::isnan(empty_bucket[0].perplexity));
  EXPECT_THROW(freq_bucket_report(scores, freq, {100, 10}), std::invalid_argument);
  EXPECT_THROW(freq_bucket_report(scores, freq, {10, 10}), std::invalid_argument);
}

TEST(Reports, JsonAndCsv) {
  const auto m = random_model(4);
  const auto doc = random_tokens(40, m.shape().vocab_size, 8);
  auto r = eval_clm(m, doc, memory(16, {1}));
  r.config_digest = "abc";
  const auto j = to_json(r);
  EXPECT_EQ(j["per_window"].size(), 3u);
  EXPECT_EQ(j["config_digest"], "abc");
  EXPECT_DOUBLE_EQ(j["perplexity"].get<double>(), r.perplexity);
  std::ostringstream os;
  write_windows_csv(os, r);
  EXPECT_EQ(os.str().substr(0, 24), "index,tokens,targets,nll");
}

TEST(Corpus, DeterministicAndShaped) {
  EXPECT_EQ(synthetic_training_text(5000, 3), synthetic_training_text(5000, 3));
  EXPECT_NE(synthetic_training_text(5000, 3), synthetic_training_text(5000, 4));
  const auto doc = repetition_document(256, 20, 5);
  ASSERT_EQ(doc.size(), 256u * 20u);
  for (std::size_t r = 1; r < 20; ++r) EXPECT_EQ(doc.substr(r * 256, 256), doc.substr(0, 256));
  for (char c : synthetic_training_text(5000, 3)) EXPECT_NE(PseudoLanguage::alphabet().find(c), std::string::npos);
  EXPECT_EQ(synthetic_training_text(5000, 3).size(), 5000u);
}

TEST(Corpus, CopyDrillsRepeatThemselves) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 100; ++i) {
    const auto d = copy_drill(rng);
    ASSERT_EQ(d.size() % 2, 0u);
    ASSERT_GE(d.size(), 16u);
    ASSERT_LE(d.size(), 64u);
    EXPECT_EQ(d.substr(0, d.size() / 2), d.substr(d.size() / 2));
    EXPECT_EQ(d.find_first_of(" ."), std::string::npos);
  }
  const auto text = copy_drill_text(2000, 1);
  EXPECT_EQ(text.substr(0, PseudoLanguage::alphabet().size()), PseudoLanguage::alphabet());
  EXPECT_EQ(text.find_first_of(" .", PseudoLanguage::alphabet().size()), std::string::npos);
}

#pragma once

// Synthetic character corpora. Text is drawn from a fixed pseudo-word
// lexicon with Zipfian word frequencies. Training text interleaves that with
// copy drills: a random letter string written twice in a row.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace camelot::lm {

struct CorpusStyle {
  std::size_t lexicon_size = 400;
  std::uint64_t lexicon_seed = 12345;
  double zipf_exponent = 1.1;
  // Probability that a sentence is followed by a verbatim copy of a recent span.
  double copy_probability = 0.35;
};

class PseudoLanguage {
 public:
  explicit PseudoLanguage(const CorpusStyle& style = {}) : style_(style) {
    std::mt19937_64 rng(style.lexicon_seed);
    static const std::string consonants = "bcdfghjklmnprstvwz";
    static const std::string vowels = "aeiou";
    std::uniform_int_distribution<int> syllables(1, 3);
    while (lexicon_.size() < style.lexicon_size) {
      std::string w;
      const int n = syllables(rng);
      for (int s = 0; s < n; ++s) {
        w += consonants[rng() % consonants.size()];
        w += vowels[rng() % vowels.size()];
        if (rng() % 3 == 0) w += consonants[rng() % consonants.size()];
      }
      if (std::find(lexicon_.begin(), lexicon_.end(), w) == lexicon_.end()) lexicon_.push_back(w);
    }
    std::vector<double> weights(lexicon_.size());
    for (std::size_t i = 0; i < weights.size(); ++i)
      weights[i] = 1.0 / std::pow(static_cast<double>(i + 1), style.zipf_exponent);
    word_dist_ = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
  }

  static std::string alphabet() { return "abcdefghijklmnopqrstuvwxyz ."; }

  std::string sentence(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> words(4, 12);
    std::string s;
    const int n = words(rng);
    for (int i = 0; i < n; ++i) {
      if (i) s += ' ';
      s += lexicon_[word_dist_(rng)];
    }
    return s + ". ";
  }

  /// Running text of exactly `chars` characters.
  std::string text(std::size_t chars, std::uint64_t seed, bool with_copies) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution copy(style_.copy_probability);
    std::string out;
    while (out.size() < chars) {
      out += sentence(rng);
      if (with_copies && copy(rng) && out.size() > 40) {
        const std::size_t span = std::min<std::size_t>(out.size(), 20 + rng() % 41);
        const std::size_t back = std::min<std::size_t>(out.size() - span, rng() % 60);
        const std::size_t from = out.size() - span - back;
        out += out.substr(from, span);
      }
    }
    out.resize(chars);
    return out;
  }

  const std::vector<std::string>& lexicon() const { return lexicon_; }

 private:
  CorpusStyle style_;
  std::vector<std::string> lexicon_;
  std::discrete_distribution<std::size_t> word_dist_;
};

/// Random letters of length 8..32, written twice.
inline std::string copy_drill(std::mt19937_64& rng) {
  static const std::string letters = "abcdefghijklmnopqrstuvwxyz";
  const std::size_t k = 8 + rng() % 25;
  std::string chunk;
  for (std::size_t i = 0; i < k; ++i) chunk += letters[rng() % letters.size()];
  return chunk + chunk;
}

/// Pseudo-language pieces of 40..119 characters mixed with copy drills;
/// `drill_fraction` is the chance that each piece is a drill.
inline std::string synthetic_training_text(std::size_t chars = 100'000, std::uint64_t seed = 1,
                                           double drill_fraction = 0.6) {
  PseudoLanguage lang;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution drill(drill_fraction);
  // The alphabet prefix guarantees every symbol is in the vocabulary.
  std::string out = PseudoLanguage::alphabet();
  while (out.size() < chars) {
    if (drill(rng))
      out += copy_drill(rng);
    else
      out += lang.text(40 + rng() % 80, rng(), true);
  }
  out.resize(std::max(chars, PseudoLanguage::alphabet().size()));
  return out;
}

inline std::string copy_drill_text(std::size_t chars = 100'000, std::uint64_t seed = 1) {
  return synthetic_training_text(chars, seed, 1.0);
}

/// One fresh passage of `passage_chars` characters repeated `repeats` times.
inline std::string repetition_document(std::size_t passage_chars = 256, std::size_t repeats = 20,
                                       std::uint64_t seed = 777) {
  PseudoLanguage lang;
  const std::string passage = lang.text(passage_chars, seed, false);
  std::string doc;
  for (std::size_t r = 0; r < repeats; ++r) doc += passage;
  return doc;
}

}  // namespace camelot::lm

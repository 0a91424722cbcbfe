#pragma once

// Evaluation protocols for the memory-augmented model.
//
// CLM: a document is cut into non-overlapping windows of L tokens. For each
// window and each augmented layer/head the bank is read with the window's
// native keys, the retrieved slots are prepended to attention, and then the
// window's keys/values are written back.
//
// ICL: demonstration windows are written without any read; each answer option
// is then scored with read-augmented attention on its own copy of the banks.

#include "camelot/lm/model.hpp"
#include "camelot/memory_bank.hpp"
#include "camelot/slot_log.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace camelot::lm {

struct MemoryConfig {
  std::size_t window = 64;
  // Layers that carry a bank per head; empty means the plain model.
  std::vector<std::size_t> augmented_layers;
  // Template for every bank; `dim` is replaced by the model's head dim.
  BankConfig bank;
  bool read = true;
  bool write = true;
  bool reset_per_document = true;
  bool slot_log = false;

  void validate(const ModelShape& shape) const {
    if (window == 0) throw std::invalid_argument("MemoryConfig: window must be positive");
    if (window > shape.max_positions)
      throw std::invalid_argument("MemoryConfig: window exceeds the model's max_positions");
    for (auto l : augmented_layers)
      if (l >= shape.layers) throw std::invalid_argument("MemoryConfig: augmented layer out of range");
  }
};

/// Derives an independent bank seed per (layer, head) from the ablation seed.
inline std::uint64_t bank_seed(std::uint64_t base, std::size_t layer, std::size_t head) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(head)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

enum class ProtocolOp { read, write };

struct ProtocolEvent {
  std::size_t window = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  ProtocolOp op = ProtocolOp::read;
  std::size_t retrieved = 0;  // P for reads
};

/// One bank per (augmented layer, head), plugged into the model's layer hooks.
class BankSet : public LayerMemory {
 public:
  BankSet(const ModelShape& shape, const MemoryConfig& cfg) : shape_(shape), cfg_(cfg) {
    cfg_.validate(shape);
    layer_slot_.assign(shape.layers, -1);
    for (auto l : cfg_.augmented_layers) {
      if (layer_slot_[l] >= 0) continue;
      layer_slot_[l] = static_cast<int>(banks_.size());
      std::vector<MemoryBank> heads;
      for (std::size_t h = 0; h < shape.heads; ++h) {
        BankConfig bc = cfg_.bank;
        bc.dim = shape.head_dim;
        bc.seed = bank_seed(cfg_.bank.seed, l, h);
        heads.emplace_back(bc);
      }
      banks_.push_back(std::move(heads));
      logs_.emplace_back(shape.heads, SlotLog(cfg_.bank.capacity));
      layer_ids_.push_back(l);
    }
    read_enabled_ = cfg_.read;
    write_enabled_ = cfg_.write;
  }

  void reset() {
    const bool keep_tracing = tracing;
    *this = BankSet(shape_, cfg_);
    tracing = keep_tracing;
  }

  void set_phase(bool read_enabled, bool write_enabled) {
    read_enabled_ = read_enabled;
    write_enabled_ = write_enabled;
  }

  void begin_window(std::size_t index, std::vector<std::string> labels = {}) {
    window_index_ = index;
    labels_ = std::move(labels);
  }

  bool augmented(std::size_t layer) const { return layer < layer_slot_.size() && layer_slot_[layer] >= 0; }
  std::size_t augmented_heads() const { return banks_.size() * shape_.heads; }
  MemoryBank& bank(std::size_t layer, std::size_t head) { return banks_.at(slot_of(layer)).at(head); }
  const MemoryBank& bank(std::size_t layer, std::size_t head) const { return banks_.at(slot_of(layer)).at(head); }
  const SlotLog& slot_log(std::size_t layer, std::size_t head) const { return logs_.at(slot_of(layer)).at(head); }
  const std::vector<std::size_t>& augmented_layers() const { return layer_ids_; }

  std::uint64_t total_count() const {
    std::uint64_t n = 0;
    for (const auto& layer : banks_)
      for (const auto& b : layer) n += b.stats().total_count;
    return n;
  }
  std::uint64_t destroyed_count() const { return destroyed_; }
  std::uint64_t written_tokens() const { return written_; }

  bool tracing = false;
  std::vector<ProtocolEvent> trace;

  std::vector<ReadResult> read(std::size_t layer, const KvWindow& window) override {
    if (!augmented(layer) || !read_enabled_) return {};
    auto& heads = banks_[slot_of(layer)];
    std::vector<ReadResult> out;
    for (std::size_t h = 0; h < heads.size(); ++h) {
      out.push_back(heads[h].read(window.keys[h]));
      if (tracing) trace.push_back({window_index_, layer, h, ProtocolOp::read, out.back().size()});
    }
    return out;
  }

  void write(std::size_t layer, const KvWindow& window) override {
    if (!augmented(layer) || !write_enabled_) return;
    auto& heads = banks_[slot_of(layer)];
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const auto report = heads[h].write(window.keys[h], window.values[h]);
      destroyed_ += report.destroyed_count;
      written_ += report.per_token_slot.size();
      if (cfg_.slot_log && labels_.size() == report.per_token_slot.size())
        logs_[slot_of(layer)][h].record(report, labels_);
      if (tracing) trace.push_back({window_index_, layer, h, ProtocolOp::write, 0});
    }
  }

  void write_slot_log_csv(std::ostream& os) const {
    os << "layer,head,slot,order,label,action\n";
    for (std::size_t i = 0; i < logs_.size(); ++i)
      for (std::size_t h = 0; h < logs_[i].size(); ++h) {
        const auto& log = logs_[i][h];
        for (std::size_t s = 0; s < log.capacity(); ++s)
          for (std::size_t k = 0; k < log.history(s).size(); ++k) {
            const auto& e = log.history(s)[k];
            std::string label = e.label == "\n" ? "\\n" : e.label;
            if (label == "," || label == "\"") label = "\"" + (label == "\"" ? std::string("\"\"") : label) + "\"";
            os << layer_ids_[i] << ',' << h << ',' << s << ',' << k << ',' << label << ',' << to_string(e.action)
               << '\n';
          }
      }
  }

 private:
  std::size_t slot_of(std::size_t layer) const {
    if (!augmented(layer)) throw std::out_of_range("BankSet: layer is not memory-augmented");
    return static_cast<std::size_t>(layer_slot_[layer]);
  }

  ModelShape shape_;
  MemoryConfig cfg_;
  std::vector<int> layer_slot_;
  std::vector<std::size_t> layer_ids_;
  std::vector<std::vector<MemoryBank>> banks_;
  std::vector<std::vector<SlotLog>> logs_;
  bool read_enabled_ = true;
  bool write_enabled_ = true;
  std::size_t window_index_ = 0;
  std::vector<std::string> labels_;
  std::uint64_t destroyed_ = 0;
  std::uint64_t written_ = 0;
};

struct WindowResult {
  // NLL of token i+1 given tokens 0..i of the same window.
  std::vector<double> token_nll;
  std::vector<TokenId> targets;

  double total() const {
    double s = 0.0;
    for (double x : token_nll) s += x;
    return s;
  }
};

/// Read -> augment -> write for one window, then score next-token targets.
inline WindowResult process_window_clm(const TinyLm& model, BankSet& banks, std::span<const TokenId> tokens,
                                       std::size_t window_index = 0) {
  model.check_tokens(tokens);
  std::vector<std::string> labels;
  for (auto id : tokens) labels.push_back(model.vocab().decode(id));
  banks.begin_window(window_index, std::move(labels));
  const Matrix lg = model.logits(tokens, &banks);
  WindowResult r;
  for (Eigen::Index i = 0; i + 1 < lg.rows(); ++i) {
    const auto target = tokens[static_cast<std::size_t>(i + 1)];
    r.token_nll.push_back(TinyLm::token_nll(lg, i, target));
    r.targets.push_back(target);
  }
  return r;
}

/// The plain model on one window (no memory at all).
inline WindowResult plain_window(const TinyLm& model, std::span<const TokenId> tokens) {
  const Matrix lg = model.logits(tokens);
  WindowResult r;
  for (Eigen::Index i = 0; i + 1 < lg.rows(); ++i) {
    const auto target = tokens[static_cast<std::size_t>(i + 1)];
    r.token_nll.push_back(TinyLm::token_nll(lg, i, target));
    r.targets.push_back(target);
  }
  return r;
}

struct WindowRecord {
  std::size_t index = 0;
  std::size_t tokens = 0;
  std::size_t targets = 0;
  double nll = 0.0;  // mean over targets; NaN when the window has none
};

struct TokenScore {
  TokenId token = 0;
  double nll = 0.0;
};

struct FrequencyBucket {
  std::string label;
  std::uint64_t lower = 0;  // inclusive
  std::uint64_t upper = 0;  // exclusive; max() for the top bucket
  std::size_t tokens = 0;
  double mean_nll = std::numeric_limits<double>::quiet_NaN();
  double perplexity = std::numeric_limits<double>::quiet_NaN();
};

struct EvalReport {
  std::string ablation = "full";
  std::string config_digest;
  std::vector<WindowRecord> per_window;
  std::vector<TokenScore> token_scores;
  std::size_t targets = 0;
  double mean_nll = 0.0;
  double perplexity = 1.0;
  std::vector<FrequencyBucket> buckets;

  void add_window(const WindowResult& w, std::size_t tokens) {
    WindowRecord rec;
    rec.index = per_window.size();
    rec.tokens = tokens;
    rec.targets = w.token_nll.size();
    rec.nll = rec.targets ? w.total() / static_cast<double>(rec.targets) : std::numeric_limits<double>::quiet_NaN();
    per_window.push_back(rec);
    for (std::size_t i = 0; i < w.token_nll.size(); ++i) token_scores.push_back({w.targets[i], w.token_nll[i]});
  }

  void finalize() {
    double total = 0.0;
    for (const auto& t : token_scores) total += t.nll;
    targets = token_scores.size();
    mean_nll = targets ? total / static_cast<double>(targets) : 0.0;
    perplexity = std::exp(mean_nll);
  }
};

/// CLM over one document with fresh banks (or the caller's, if given).
inline EvalReport eval_clm(const TinyLm& model, std::span<const TokenId> document, const MemoryConfig& cfg,
                           BankSet* banks = nullptr) {
  if (document.size() < 2) throw std::invalid_argument("eval_clm: document needs at least two tokens");
  cfg.validate(model.shape());
  std::optional<BankSet> own;
  if (!banks) banks = &own.emplace(model.shape(), cfg);
  EvalReport report;
  report.ablation = std::string(to_string(cfg.bank.ablation));
  for (std::size_t start = 0, w = 0; start < document.size(); start += cfg.window, ++w) {
    const auto len = std::min(cfg.window, document.size() - start);
    const auto window = document.subspan(start, len);
    report.add_window(process_window_clm(model, *banks, window, w), len);
  }
  report.finalize();
  return report;
}

/// CLM over several documents; banks reset per document unless disabled.
inline EvalReport eval_clm_documents(const TinyLm& model, const std::vector<std::vector<TokenId>>& documents,
                                     const MemoryConfig& cfg) {
  BankSet banks(model.shape(), cfg);
  EvalReport all;
  all.ablation = std::string(to_string(cfg.bank.ablation));
  for (const auto& doc : documents) {
    if (cfg.reset_per_document) banks.reset();
    const auto r = eval_clm(model, doc, cfg, &banks);
    for (auto rec : r.per_window) {
      rec.index = all.per_window.size();
      all.per_window.push_back(rec);
    }
    all.token_scores.insert(all.token_scores.end(), r.token_scores.begin(), r.token_scores.end());
  }
  all.finalize();
  return all;
}

/// Plain windowed model without any memory; the reference for identity checks.
inline EvalReport eval_plain(const TinyLm& model, std::span<const TokenId> document, std::size_t window) {
  EvalReport report;
  report.ablation = "none";
  for (std::size_t start = 0; start < document.size(); start += window) {
    const auto len = std::min(window, document.size() - start);
    report.add_window(plain_window(model, document.subspan(start, len)), len);
  }
  report.finalize();
  return report;
}

struct IclResult {
  std::size_t chosen = 0;
  std::vector<double> option_perplexity;
};

inline IclResult eval_icl(const TinyLm& model, const MemoryConfig& cfg,
                          const std::vector<std::vector<TokenId>>& examples, const std::vector<TokenId>& question,
                          const std::vector<std::vector<TokenId>>& options, BankSet* prefill_out = nullptr) {
  if (options.empty()) throw std::invalid_argument("eval_icl: no options");
  if (question.empty()) throw std::invalid_argument("eval_icl: empty question");
  BankSet banks(model.shape(), cfg);
  banks.tracing = prefill_out ? prefill_out->tracing : false;
  banks.set_phase(false, true);
  std::size_t w = 0;
  for (const auto& ex : examples)
    for (std::size_t start = 0; start < ex.size(); start += cfg.window, ++w) {
      const auto len = std::min(cfg.window, ex.size() - start);
      const auto window = std::span(ex).subspan(start, len);
      model.check_tokens(window);
      banks.begin_window(w);
      model.logits(window, &banks);
    }
  if (prefill_out) *prefill_out = banks;

  IclResult result;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t o = 0; o < options.size(); ++o) {
    if (options[o].empty()) throw std::invalid_argument("eval_icl: empty option");
    BankSet scoring = banks;
    scoring.set_phase(cfg.read, cfg.write);
    std::vector<TokenId> seq = question;
    seq.insert(seq.end(), options[o].begin(), options[o].end());
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t start = 0; start < seq.size(); start += cfg.window) {
      const auto len = std::min(cfg.window, seq.size() - start);
      const auto r = process_window_clm(model, scoring, std::span(seq).subspan(start, len), w + start / cfg.window);
      for (std::size_t i = 0; i < r.token_nll.size(); ++i)
        if (start + i + 1 >= question.size()) total += r.token_nll[i], ++n;
    }
    const double ppl = n ? std::exp(total / static_cast<double>(n)) : std::numeric_limits<double>::infinity();
    result.option_perplexity.push_back(ppl);
    if (ppl < best) best = ppl, result.chosen = o;
  }
  return result;
}

/// Token counts of a training corpus, keyed by token id.
inline std::map<TokenId, std::uint64_t> token_frequencies(std::span<const TokenId> corpus) {
  std::map<TokenId, std::uint64_t> f;
  for (auto t : corpus) ++f[t];
  return f;
}

/// Per-bucket perplexity by training frequency. `edges` are increasing
/// frequency thresholds; bucket k holds tokens with edges[k-1] <= f < edges[k].
/// Buckets are returned most-frequent first; tokens absent from the table
/// fall into the lowest bucket.
inline std::vector<FrequencyBucket> freq_bucket_report(const std::vector<TokenScore>& scores,
                                                       const std::map<TokenId, std::uint64_t>& frequency,
                                                       const std::vector<std::uint64_t>& edges = {100, 1000, 10000}) {
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) throw std::invalid_argument("freq_bucket_report: edges must be increasing");
  const std::size_t nb = edges.size() + 1;
  std::vector<FrequencyBucket> buckets(nb);
  std::vector<double> sums(nb, 0.0);
  for (std::size_t k = 0; k < nb; ++k) {
    auto& b = buckets[k];
    b.lower = k == 0 ? 0 : edges[k - 1];
    b.upper = k == edges.size() ? std::numeric_limits<std::uint64_t>::max() : edges[k];
    if (k == 0)
      b.label = edges.empty() ? "all" : "<" + std::to_string(edges[0]);
    else if (k == edges.size())
      b.label = ">=" + std::to_string(edges.back());
    else
      b.label = std::to_string(b.lower) + "-" + std::to_string(b.upper);
  }
  for (const auto& s : scores) {
    auto it = frequency.find(s.token);
    const std::uint64_t f = it == frequency.end() ? 0 : it->second;
    const auto k = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), f) - edges.begin());
    ++buckets[k].tokens;
    sums[k] += s.nll;
  }
  for (std::size_t k = 0; k < nb; ++k)
    if (buckets[k].tokens) {
      buckets[k].mean_nll = sums[k] / static_cast<double>(buckets[k].tokens);
      buckets[k].perplexity = std::exp(buckets[k].mean_nll);
    }
  std::reverse(buckets.begin(), buckets.end());
  return buckets;
}

inline nlohmann::json to_json(const EvalReport& r) {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["config_digest"] = r.config_digest;
  j["ablation"] = r.ablation;
  j["perplexity"] = r.perplexity;
  j["mean_nll"] = r.mean_nll;
  j["targets"] = r.targets;
  j["per_window"] = nlohmann::json::array();
  for (const auto& w : r.per_window)
    j["per_window"].push_back({{"index", w.index}, {"tokens", w.tokens}, {"targets", w.targets}, {"nll", num(w.nll)}});
  j["buckets"] = nlohmann::json::array();
  for (const auto& b : r.buckets)
    j["buckets"].push_back(
        {{"label", b.label}, {"tokens", b.tokens}, {"mean_nll", num(b.mean_nll)}, {"perplexity", num(b.perplexity)}});
  return j;
}

inline void write_windows_csv(std::ostream& os, const EvalReport& r) {
  os << "index,tokens,targets,nll\n";
  os.precision(17);
  for (const auto& w : r.per_window) {
    os << w.index << ',' << w.tokens << ',' << w.targets << ',';
    if (std::isfinite(w.nll)) os << w.nll;
    os << '\n';
  }
}

}  // namespace camelot::lm

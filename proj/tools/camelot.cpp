// camelot: command-line driver for memory simulations, toy-model training,
// CLM evaluation, hyper-parameter sweeps and snapshot inspection.
//
// Exit codes: 0 success, 1 failed check (--assert, corrupt snapshot),
// 2 usage or I/O error.

#include "cli_support.hpp"

#include "camelot/lm/corpus.hpp"
#include "camelot/lm/eval.hpp"
#include "camelot/lm/train.hpp"
#include "camelot/sim/stream.hpp"
#include "camelot/snapshot.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace camelot;
using namespace camelot::cli;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  try {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
  } catch (const json::exception& e) {
    throw UsageError(std::string("config field '") + key + "': " + e.what());
  }
}

void stamp(json& report, const json& config, bool deterministic, std::optional<double> seconds = {}) {
  report["config_digest"] = config_digest(config);
  report["config"] = config;
  if (!deterministic) {
    report["generated_at"] = utc_timestamp();
    if (seconds) report["seconds"] = *seconds;
  }
}

std::string fmt(double x, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << x;
  return os.str();
}

/// Path flags are relative to the working directory; config paths to the
/// config file, so flag paths are made absolute when a config is in use.
std::string flag_path(const std::string& p, const fs::path& base) {
  return base.empty() ? p : fs::absolute(p).string();
}

// ---------------------------------------------------------------- corpus

struct CorpusArgs {
  std::string kind = "training";
  std::string out;
  std::size_t chars = 100'000;
  std::size_t passage = 256;
  std::size_t repeats = 20;
  std::uint64_t seed = 1;
};

int cmd_corpus(const CorpusArgs& a) {
  std::string text;
  if (a.kind == "training")
    text = lm::synthetic_training_text(a.chars, derive_seed(a.seed, "train"));
  else if (a.kind == "repetition")
    text = lm::repetition_document(a.passage, a.repeats, derive_seed(a.seed, "stream"));
  else
    throw UsageError("--kind must be training or repetition");
  write_text(a.out, text);
  std::cout << "wrote " << text.size() << " characters to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string corpus;
  std::size_t synthetic = 100'000;
  std::string out;
  std::string report;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, batch, seq_len, layers, heads, head_dim, mlp, positions;
  std::optional<std::size_t> drill_steps;
  std::optional<double> lr, drill_lr;
  bool deterministic = false;
};

int cmd_train(const TrainArgs& a) {
  json cfg = a.config.empty() ? json::object() : load_json(a.config);
  const fs::path base = a.config.empty() ? fs::path() : fs::path(a.config).parent_path();
  if (a.seed) cfg["seed"] = *a.seed;
  if (!a.corpus.empty()) cfg["corpus"] = flag_path(a.corpus, base);
  auto& shape_j = cfg["model"];
  if (shape_j.is_null()) shape_j = json::object();
  if (a.layers) shape_j["layers"] = *a.layers;
  if (a.heads) shape_j["heads"] = *a.heads;
  if (a.head_dim) shape_j["head_dim"] = *a.head_dim;
  if (a.mlp) shape_j["mlp_hidden"] = *a.mlp;
  if (a.positions) shape_j["max_positions"] = *a.positions;
  auto& tr = cfg["train"];
  if (tr.is_null()) tr = json::object();
  if (a.steps) tr["steps"] = *a.steps;
  if (a.batch) tr["batch_size"] = *a.batch;
  if (a.seq_len) tr["seq_len"] = *a.seq_len;
  if (a.lr) tr["learning_rate"] = *a.lr;
  if (a.drill_steps) tr["drill_steps"] = *a.drill_steps;
  if (a.drill_lr) tr["drill_learning_rate"] = *a.drill_lr;

  const std::uint64_t seed = get_or<std::uint64_t>(cfg, "seed", 1);
  std::string text;
  if (cfg.contains("corpus"))
    text = read_text(resolve(base, cfg["corpus"].get<std::string>()).string());
  else
    text = lm::synthetic_training_text(get_or<std::size_t>(cfg, "synthetic_chars", a.synthetic),
                                       derive_seed(seed, "train"));
  const auto vocab = lm::CharVocab::from_text(text);
  const auto ids = vocab.encode(text);
  const auto drill_text = lm::copy_drill_text(get_or<std::size_t>(cfg, "drill_chars", 100'000),
                                              derive_seed(seed, "drill"));
  for (char c : drill_text)
    if (!vocab.contains(c)) throw UsageError("training corpus lacks letter '" + std::string(1, c) + "' used by drills");

  lm::ModelShape shape;
  shape.vocab_size = vocab.size();
  shape.layers = get_or(shape_j, "layers", shape.layers);
  shape.heads = get_or(shape_j, "heads", shape.heads);
  shape.head_dim = get_or(shape_j, "head_dim", shape.head_dim);
  shape.mlp_hidden = get_or(shape_j, "mlp_hidden", shape.mlp_hidden);
  shape.max_positions = get_or(shape_j, "max_positions", shape.max_positions);
  lm::TrainConfig tc;
  tc.steps = get_or(tr, "steps", tc.steps);
  tc.batch_size = get_or(tr, "batch_size", tc.batch_size);
  tc.seq_len = get_or(tr, "seq_len", tc.seq_len);
  tc.learning_rate = get_or(tr, "learning_rate", tc.learning_rate);
  tc.warmup = get_or(tr, "warmup", tc.warmup);
  tc.grad_clip = get_or(tr, "grad_clip", tc.grad_clip);
  tc.drill_steps = get_or(tr, "drill_steps", tc.drill_steps);
  tc.drill_learning_rate = get_or(tr, "drill_learning_rate", tc.drill_learning_rate);
  tc.seed = derive_seed(seed, "train");
  const std::size_t total_steps = tc.drill_steps + tc.steps;

  json curve = json::array();
  const auto t0 = Clock::now();
  const auto model = lm::train_lm(shape, vocab, vocab.encode(drill_text), ids, tc, [&](std::size_t step, double loss) {
    if (step % 25 == 0 || step + 1 == total_steps) curve.push_back({{"step", step}, {"loss", loss}});
    if (step % 100 == 0) std::cerr << "step " << step << " loss " << fmt(loss, 4) << "\n";
  });
  const double secs = seconds_since(t0);
  lm::save_model(model, a.out);

  json report{{"model", a.out},
              {"vocab_size", vocab.size()},
              {"parameters", model.params().size()},
              {"corpus_chars", ids.size()},
              {"log_vocab", std::log(static_cast<double>(vocab.size()))},
              {"loss_curve", curve}};
  stamp(report, cfg, a.deterministic, secs);
  write_text(a.report.empty() ? a.out + ".report.json" : a.report, report.dump(2) + "\n");
  std::cout << "trained " << model.params().size() << " parameters in " << fmt(secs, 3) << " s; model written to "
            << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- simulate

struct SimArgs {
  std::string config;
  std::string out = ".";
  std::string snapshot;
  bool check = false;
  bool deterministic = false;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
  std::optional<std::size_t> capacity, window;
  std::string ablation;
};

struct SimSetup {
  sim::MixtureSpec spec;
  BankConfig bank;
  std::size_t window = 16;
};

SimSetup sim_setup(const json& cfg) {
  SimSetup s;
  const std::uint64_t seed = get_or<std::uint64_t>(cfg, "seed", 0);
  if (!cfg.contains("stream")) throw UsageError("config has no 'stream' section");
  json stream = cfg.at("stream");
  if (!stream.contains("seed")) stream["seed"] = derive_seed(seed, "stream");
  try {
    s.spec = sim::mixture_from_json(stream);
  } catch (const json::exception& e) {
    throw UsageError(std::string("stream: ") + e.what());
  }
  BankConfig base;
  base.seed = derive_seed(seed, "ablation");
  s.bank = bank_from_json(cfg.value("bank", json::object()), base);
  s.bank.dim = s.spec.dim();
  s.window = get_or(cfg, "window", s.window);
  return s;
}

struct Check {
  std::string name;
  bool pass = true;
  std::string detail;
};

int cmd_simulate(const SimArgs& a) {
  json cfg = load_json(a.config);
  if (a.seed) cfg["seed"] = *a.seed;
  if (a.window) cfg["window"] = *a.window;
  if (a.threshold) cfg["bank"]["threshold"] = *a.threshold;
  if (a.capacity) cfg["bank"]["capacity"] = *a.capacity;
  if (!a.ablation.empty()) cfg["bank"]["ablation"] = a.ablation;
  const auto setup = sim_setup(cfg);
  const bool fifo = setup.bank.ablation == Ablation::no_consolidation;

  sim::StreamRunOptions opts;
  opts.record_states = fifo;
  if (cfg.contains("samples")) opts.samples = cfg["samples"].get<std::size_t>();
  const auto t0 = Clock::now();
  const auto run = sim::run_memory_on_stream(setup.spec, setup.bank, setup.window, opts);
  const double secs = seconds_since(t0);
  const auto metrics = sim::mode_recovery_metrics(run, setup.spec);

  std::vector<Check> checks;
  {
    // Instance-recording oracle: each slot's count equals the instances the log placed there.
    Check c{"counts_match_event_log", true, ""};
    const auto members = sim::slot_members(run.events);
    for (std::size_t s = 0; s < run.bank.capacity() && c.pass; ++s) {
      const std::uint64_t want = run.bank.occupied(s) && members.count(s) ? members.at(s).size() : 0;
      if (run.bank.count(s) != want) c = {c.name, false, "slot " + std::to_string(s) + " count " +
                                                             std::to_string(run.bank.count(s)) + " != " +
                                                             std::to_string(want)};
    }
    checks.push_back(c);
  }
  std::optional<std::size_t> divergence;
  if (fifo) {
    const auto f = sim::fifo_oracle_check(run, setup.bank.capacity);
    checks.push_back({"fifo_oracle", f.pass, f.message});
    divergence = f.divergence_event;
  }
  if (cfg.contains("expect")) {
    const auto& e = cfg["expect"];
    auto expect = [&](const char* key, bool ok, const std::string& got) {
      checks.push_back({std::string("expect_") + key, ok, "observed " + got});
    };
    if (e.contains("occupied"))
      expect("occupied", metrics.occupied == e["occupied"].get<std::size_t>(), std::to_string(metrics.occupied));
    if (e.contains("recovered"))
      expect("recovered", metrics.recovered == e["recovered"].get<std::size_t>(), std::to_string(metrics.recovered));
    if (e.contains("max_key_error"))
      expect("max_key_error", metrics.mean_key_error <= e["max_key_error"].get<double>(), fmt(metrics.mean_key_error));
    if (e.contains("max_sample_mean_error"))
      expect("max_sample_mean_error", metrics.max_sample_mean_error <= e["max_sample_mean_error"].get<double>(),
             fmt(metrics.max_sample_mean_error));
    if (e.contains("min_purity"))
      expect("min_purity", metrics.purity >= e["min_purity"].get<double>(), fmt(metrics.purity));
    if (e.contains("no_survivors_from_phase")) {
      const auto phase = e["no_survivors_from_phase"].get<std::size_t>();
      std::size_t survivors = 0;
      for (const auto& [slot, idx] : sim::slot_members(run.events))
        if (run.bank.occupied(slot) &&
            std::any_of(idx.begin(), idx.end(), [&](std::size_t i) { return run.samples[i].phase == phase; }))
          ++survivors;
      expect("no_survivors_from_phase", survivors == 0, std::to_string(survivors) + " slot(s)");
    }
  }

  const fs::path out(a.out);
  std::ostringstream events;
  sim::write_events_csv(events, run.events);
  write_text(out / "events.csv", events.str());
  json report{{"metrics", sim::to_json(metrics)},
              {"bank", bank_to_json(setup.bank)},
              {"window", setup.window},
              {"samples", run.samples.size()},
              {"checks", json::array()}};
  for (const auto& c : checks) report["checks"].push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
  stamp(report, cfg, a.deterministic, secs);
  write_text(out / "metrics.json", report.dump(2) + "\n");
  if (!a.snapshot.empty()) save_snapshot(run.bank, a.snapshot);

  std::cout << "samples " << run.samples.size() << ", occupancy " << metrics.occupied << "/" << setup.bank.capacity
            << ", recovered " << metrics.recovered << "/" << metrics.modes_seen << ", purity " << fmt(metrics.purity)
            << "\n";
  bool ok = true;
  for (const auto& c : checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : ": " + c.detail) << "\n";
    ok = ok && c.pass;
  }
  if (divergence) {
    const auto it = std::find_if(run.events.begin(), run.events.end(),
                                 [&](const sim::StreamEvent& e) { return e.index == *divergence; });
    if (it != run.events.end()) {
      std::ostringstream row;
      sim::write_events_csv(row, {*it});
      std::cout << "divergence:\n" << row.str();
    }
  }
  return a.check && !ok ? kOracleFailure : kOk;
}

// ---------------------------------------------------------------- eval-clm

struct EvalArgs {
  std::string config;
  std::string model, corpus, train_corpus;
  std::string ablations, windows, layers, similarity;
  std::optional<std::size_t> memory;
  std::optional<double> threshold;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string snapshot_dir;
  bool slot_log = false;
  bool deterministic = false;
};

struct EvalSetup {
  json config;
  fs::path base;
  lm::TinyLm model;
  std::vector<lm::TokenId> doc;
  std::optional<std::map<lm::TokenId, std::uint64_t>> freq;
  std::vector<std::uint64_t> edges{100, 1000, 10000};
};

std::vector<lm::TokenId> encode_file(const lm::TinyLm& model, const fs::path& path) {
  try {
    return model.vocab().encode(read_text(path.string()));
  } catch (const std::out_of_range& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

EvalSetup eval_setup(json cfg, const fs::path& base) {
  EvalSetup s;
  s.config = std::move(cfg);
  s.base = base;
  if (!s.config.contains("model")) throw UsageError("no model given (config 'model' or --model)");
  if (!s.config.contains("corpus")) throw UsageError("no corpus given (config 'corpus' or --corpus)");
  const auto model_path = resolve(base, s.config["model"].get<std::string>());
  if (!fs::exists(model_path)) throw UsageError("model file not found: " + model_path.string());
  try {
    s.model = lm::load_model(model_path.string());
  } catch (const std::exception& e) {
    throw UsageError(model_path.string() + ": " + e.what());
  }
  s.doc = encode_file(s.model, resolve(base, s.config["corpus"].get<std::string>()));
  if (s.config.contains("train_corpus"))
    s.freq = lm::token_frequencies(encode_file(s.model, resolve(base, s.config["train_corpus"].get<std::string>())));
  s.edges = get_or(s.config, "bucket_edges", s.edges);
  return s;
}

lm::MemoryConfig memory_config(const json& cfg, const lm::ModelShape& shape, std::size_t window, Ablation ab) {
  lm::MemoryConfig mc;
  mc.window = window;
  const json mem = cfg.value("memory", json::object());
  std::vector<std::size_t> all_layers(shape.layers);
  std::iota(all_layers.begin(), all_layers.end(), std::size_t{0});
  mc.augmented_layers = get_or(mem, "layers", all_layers);
  BankConfig base;
  base.seed = derive_seed(get_or<std::uint64_t>(cfg, "seed", 1), "ablation");
  mc.bank = bank_from_json(mem, base);
  mc.bank.ablation = ab;
  mc.reset_per_document = get_or(mem, "reset_per_document", true);
  return mc;
}

struct EvalJob {
  std::optional<Ablation> ablation;  // empty: plain model baseline
  std::size_t window = 64;
};

json run_eval_job(const EvalSetup& s, const EvalJob& job, const EvalArgs& a, const std::string& stem) {
  const auto t0 = Clock::now();
  lm::EvalReport report;
  std::optional<lm::BankSet> banks;
  if (job.ablation) {
    auto mc = memory_config(s.config, s.model.shape(), job.window, *job.ablation);
    mc.slot_log = a.slot_log;
    try {
      mc.validate(s.model.shape());
      mc.bank.dim = s.model.shape().head_dim;
      mc.bank.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    banks.emplace(s.model.shape(), mc);
    report = lm::eval_clm(s.model, s.doc, mc, &*banks);
  } else {
    if (job.window > s.model.shape().max_positions) throw UsageError("window exceeds the model's max_positions");
    report = lm::eval_plain(s.model, s.doc, job.window);
  }
  const double secs = seconds_since(t0);
  if (s.freq) report.buckets = lm::freq_bucket_report(report.token_scores, *s.freq, s.edges);
  report.config_digest = config_digest(s.config);

  const fs::path out(a.out);
  json j = lm::to_json(report);
  j["window"] = job.window;
  stamp(j, s.config, a.deterministic, secs);
  write_text(out / (stem + ".json"), j.dump(2) + "\n");
  std::ostringstream csv;
  lm::write_windows_csv(csv, report);
  write_text(out / (stem + ".csv"), csv.str());
  if (banks && a.slot_log) {
    std::ostringstream log;
    banks->write_slot_log_csv(log);
    write_text(out / (stem + "_slots.csv"), log.str());
  }
  if (banks && !a.snapshot_dir.empty()) {
    fs::create_directories(a.snapshot_dir);
    for (auto l : banks->augmented_layers())
      for (std::size_t h = 0; h < s.model.shape().heads; ++h) {
        const auto bank_stem = fs::path(a.snapshot_dir) / (stem + "_layer" + std::to_string(l) + "_head" +
                                                           std::to_string(h));
        save_snapshot(banks->bank(l, h), bank_stem.string() + ".camb");
        // Per-bank log in the format `inspect --labels` reads.
        if (a.slot_log) {
          std::ostringstream log;
          banks->slot_log(l, h).write_csv(log);
          write_text(bank_stem.string() + "_slots.csv", log.str());
        }
      }
  }
  return {{"ablation", job.ablation ? std::string(to_string(*job.ablation)) : "baseline"},
          {"window", job.window},
          {"perplexity", report.perplexity},
          {"mean_nll", report.mean_nll},
          {"targets", report.targets},
          {"report", stem + ".json"}};
}

json apply_eval_overrides(json cfg, const EvalArgs& a, const fs::path& base) {
  if (!a.model.empty()) cfg["model"] = flag_path(a.model, base);
  if (!a.corpus.empty()) cfg["corpus"] = flag_path(a.corpus, base);
  if (!a.train_corpus.empty()) cfg["train_corpus"] = flag_path(a.train_corpus, base);
  if (a.seed) cfg["seed"] = *a.seed;
  if (!a.ablations.empty()) cfg["ablations"] = split_list(a.ablations);
  if (!a.windows.empty()) {
    cfg["windows"] = json::array();
    for (const auto& w : split_list(a.windows)) cfg["windows"].push_back(std::stoul(w));
  }
  if (a.memory) cfg["memory"]["capacity"] = *a.memory;
  if (a.threshold) cfg["memory"]["threshold"] = *a.threshold;
  if (!a.similarity.empty()) cfg["memory"]["similarity"] = a.similarity;
  if (!a.layers.empty()) {
    cfg["memory"]["layers"] = json::array();
    for (const auto& l : split_list(a.layers)) cfg["memory"]["layers"].push_back(std::stoul(l));
  }
  return cfg;
}

int cmd_eval_clm(const EvalArgs& a) {
  json cfg = a.config.empty() ? json::object() : load_json(a.config);
  const fs::path base = a.config.empty() ? fs::path() : fs::path(a.config).parent_path();
  cfg = apply_eval_overrides(std::move(cfg), a, base);
  const auto setup = eval_setup(cfg, base);

  std::vector<EvalJob> jobs;
  const auto windows = get_or(cfg, "windows", std::vector<std::size_t>{64});
  const auto names = get_or(cfg, "ablations", std::vector<std::string>{"full"});
  for (auto w : windows) {
    if (get_or(cfg, "baseline", true)) jobs.push_back({std::nullopt, w});
    for (const auto& n : names) {
      try {
        jobs.push_back({parse_ablation(n), w});
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    }
  }
  std::vector<json> rows(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t i) {
    const auto& j = jobs[i];
    const std::string stem =
        "clm_" + (j.ablation ? std::string(to_string(*j.ablation)) : std::string("baseline")) + "_L" +
        std::to_string(j.window);
    rows[i] = run_eval_job(setup, j, a, stem);
  });
  json summary{{"runs", rows}};
  stamp(summary, cfg, a.deterministic);
  write_text(fs::path(a.out) / "summary.json", summary.dump(2) + "\n");
  std::cout << std::left << std::setw(18) << "ablation" << std::setw(8) << "window" << "perplexity\n";
  for (const auto& r : rows)
    std::cout << std::setw(18) << r["ablation"].get<std::string>() << std::setw(8) << r["window"].get<std::size_t>()
              << fmt(r["perplexity"].get<double>()) << "\n";
  std::cout << "config digest " << config_digest(cfg) << "\n";
  return kOk;
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
  std::string config;
  std::string axis;
  std::string values;
  std::string out = "sweep.csv";
  bool deterministic = false;
};

std::vector<json> default_axis_values(const std::string& axis) {
  if (axis == "R") return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
  if (axis == "memory") return {128, 512, 4096, 10000};
  if (axis == "similarity") return {"cosine", "euclidean"};
  return {32, 64, 128};
}

json parse_axis_value(const std::string& axis, const std::string& v) {
  try {
    if (axis == "similarity") return v;
    if (axis == "R") return std::stod(v);
    return std::stoul(v);
  } catch (const std::logic_error&) {
    throw UsageError("bad value for axis " + axis + ": " + v);
  }
}

/// Applies one axis value to the run config. Memory-model configs keep the
/// bank under "memory"; simulation configs under "bank".
json with_axis(json cfg, const std::string& axis, const json& value) {
  const bool simulation = cfg.contains("stream");
  json& bank = cfg[simulation ? "bank" : "memory"];
  if (axis == "R") bank["threshold"] = value;
  if (axis == "memory") bank["capacity"] = value;
  if (axis == "similarity") bank["similarity"] = value;
  if (axis == "window") {
    if (simulation)
      cfg["window"] = value;
    else
      cfg["windows"] = json::array({value});
  }
  return cfg;
}

int cmd_sweep(const SweepArgs& a) {
  static const std::vector<std::string> axes{"R", "memory", "similarity", "window"};
  if (std::find(axes.begin(), axes.end(), a.axis) == axes.end())
    throw UsageError("--axis must be one of R, memory, similarity, window");
  json cfg = load_json(a.config);
  const fs::path base = fs::path(a.config).parent_path();
  std::vector<json> values;
  if (!a.values.empty())
    for (const auto& v : split_list(a.values)) values.push_back(parse_axis_value(a.axis, v));
  else if (cfg.contains("sweep") && cfg["sweep"].contains(a.axis))
    values = cfg["sweep"][a.axis].get<std::vector<json>>();
  else
    values = default_axis_values(a.axis);
  json sweep_cfg = cfg;
  sweep_cfg["sweep_axis"] = a.axis;
  sweep_cfg["sweep_values"] = values;
  const std::string digest = config_digest(sweep_cfg);
  const bool simulation = cfg.contains("stream");

  std::optional<EvalSetup> lm_setup;
  if (!simulation) lm_setup = eval_setup(cfg, base);
  const std::string ablation = simulation ? "" : get_or(cfg, "ablations", std::vector<std::string>{"full"}).front();

  std::vector<std::string> rows(values.size());
  parallel_for(values.size(), [&](std::size_t i) {
    const json row_cfg = with_axis(cfg, a.axis, values[i]);
    const std::string value = values[i].is_string() ? values[i].get<std::string>() : values[i].dump();
    std::ostringstream row;
    row << std::setprecision(10) << a.axis << ',' << value << ',';
    const auto t0 = Clock::now();
    if (simulation) {
      const auto setup = sim_setup(row_cfg);
      const auto run = sim::run_memory_on_stream(setup.spec, setup.bank, setup.window);
      const auto m = sim::mode_recovery_metrics(run, setup.spec);
      std::size_t evictions = 0;
      for (const auto& e : run.events) evictions += e.action == WriteAction::replace;
      row << to_string(setup.bank.ablation) << ',' << setup.window << ',' << m.occupied << ',' << m.recovered << ','
          << m.modes_seen << ',' << m.purity << ',' << m.mean_key_error << ',' << m.max_sample_mean_error << ','
          << evictions << ',';
    } else {
      auto mc = memory_config(row_cfg, lm_setup->model.shape(),
                              get_or(row_cfg, "windows", std::vector<std::size_t>{64}).front(),
                              parse_ablation(ablation));
      try {
        mc.validate(lm_setup->model.shape());
        mc.bank.dim = lm_setup->model.shape().head_dim;
        mc.bank.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const auto r = lm::eval_clm(lm_setup->model, lm_setup->doc, mc);
      row << ablation << ',' << mc.window << ',' << r.perplexity << ',' << r.mean_nll << ',' << r.targets << ',';
    }
    if (!a.deterministic) row << seconds_since(t0);
    row << ',' << digest << '\n';
    rows[i] = row.str();
  });
  std::string csv = simulation ? "axis,value,ablation,window,occupied,recovered,modes,purity,mean_key_error,"
                                 "max_sample_mean_error,evictions,seconds,config_digest\n"
                               : "axis,value,ablation,window,perplexity,mean_nll,targets,seconds,config_digest\n";
  for (const auto& r : rows) csv += r;
  write_text(a.out, csv);
  std::cout << csv;
  return kOk;
}

// ---------------------------------------------------------------- inspect

struct InspectArgs {
  std::string snapshot;
  std::size_t top = 10;
  std::string labels;
  bool as_json = false;
};

std::map<std::size_t, std::vector<std::string>> read_slot_labels(const std::string& path) {
  // slot,order,label,action rows as written by SlotLog::write_csv.
  std::map<std::size_t, std::vector<std::string>> out;
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += '"', ++i;
        else if (c == '"') quoted = false;
        else cur += c;
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        f.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    f.push_back(cur);
    if (f.size() < 4) throw UsageError(path + ": malformed slot log row");
    out[std::stoul(f[0])].push_back(f[2]);
  }
  return out;
}

int cmd_inspect(const InspectArgs& a) {
  if (!fs::exists(a.snapshot)) throw UsageError("snapshot not found: " + a.snapshot);
  MemoryBank bank = [&] {
    try {
      return restore(read_file_bytes(a.snapshot));
    } catch (const SnapshotError& e) {
      throw CheckFailure(std::string("format error: ") + e.what());
    }
  }();
  const auto st = bank.stats();
  std::vector<std::size_t> slots;
  for (std::size_t s = 0; s < bank.capacity(); ++s)
    if (bank.occupied(s)) slots.push_back(s);
  std::stable_sort(slots.begin(), slots.end(), [&](auto x, auto y) { return bank.count(x) > bank.count(y); });
  if (slots.size() > a.top) slots.resize(a.top);
  const auto labels = a.labels.empty() ? std::map<std::size_t, std::vector<std::string>>{} : read_slot_labels(a.labels);
  const auto& c = bank.config();

  if (a.as_json) {
    json j{{"bank", bank_to_json(c)},
           {"occupancy", st.occupancy},
           {"capacity", st.capacity},
           {"total_count", st.total_count},
           {"top", json::array()},
           {"age_histogram", json::object()}};
    for (auto s : slots) j["top"].push_back({{"slot", s}, {"count", bank.count(s)}, {"age", bank.age(s)}});
    for (const auto& [age, n] : st.age_histogram) j["age_histogram"][std::to_string(age)] = n;
    std::cout << j.dump(2) << "\n";
    return kOk;
  }
  std::cout << "bank: dim " << c.dim << ", similarity " << to_string(c.similarity) << ", ablation "
            << to_string(c.ablation) << ", R " << c.threshold << "\n";
  std::cout << "occupancy " << st.occupancy << "/" << st.capacity << "\n";
  std::cout << "total count " << st.total_count << "\n";
  if (!slots.empty()) {
    std::cout << "top slots by count:\n  slot     count       age\n";
    for (auto s : slots) {
      std::cout << "  " << std::setw(6) << s << std::setw(10) << bank.count(s) << std::setw(10) << bank.age(s);
      if (auto it = labels.find(s); it != labels.end()) {
        std::cout << "  ";
        for (std::size_t k = 0; k < std::min<std::size_t>(it->second.size(), 12); ++k)
          std::cout << (k ? " " : "") << '[' << it->second[k] << ']';
      }
      std::cout << "\n";
    }
    std::cout << "age histogram:\n   age     slots\n";
    for (const auto& [age, n] : st.age_histogram)
      std::cout << "  " << std::setw(4) << age << std::setw(10) << n << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"camelot: consolidated associative memory for causal attention"};
  app.require_subcommand(1);
  std::function<int()> action;

  CorpusArgs corpus;
  auto* c = app.add_subcommand("corpus", "Generate a synthetic corpus file");
  c->add_option("--kind", corpus.kind, "training or repetition")->capture_default_str();
  c->add_option("--out", corpus.out, "Output text file")->required();
  c->add_option("--chars", corpus.chars, "Training corpus length")->capture_default_str();
  c->add_option("--passage", corpus.passage, "Repetition passage length")->capture_default_str();
  c->add_option("--repeats", corpus.repeats, "Repetition count")->capture_default_str();
  c->add_option("--seed", corpus.seed, "Seed")->capture_default_str();
  c->callback([&] { action = [&] { return cmd_corpus(corpus); }; });

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the toy character model");
  t->add_option("config", train.config, "Optional JSON config");
  t->add_option("--corpus", train.corpus, "Training text (default: synthetic)");
  t->add_option("--synthetic-chars", train.synthetic, "Synthetic corpus length")->capture_default_str();
  t->add_option("--out", train.out, "Model output path")->required();
  t->add_option("--report", train.report, "Training report path (default: <out>.report.json)");
  t->add_option("--seed", train.seed, "Seed");
  t->add_option("--steps", train.steps, "Optimizer steps");
  t->add_option("--batch", train.batch, "Sequences per step");
  t->add_option("--seq-len", train.seq_len, "Training sequence length");
  t->add_option("--lr", train.lr, "Peak learning rate");
  t->add_option("--drill-steps", train.drill_steps, "Copy-drill warm-up steps (0 skips)");
  t->add_option("--drill-lr", train.drill_lr, "Copy-drill peak learning rate");
  t->add_option("--layers", train.layers, "Decoder layers");
  t->add_option("--heads", train.heads, "Heads per layer");
  t->add_option("--head-dim", train.head_dim, "Per-head width");
  t->add_option("--mlp-hidden", train.mlp, "MLP width");
  t->add_option("--max-positions", train.positions, "Position table size");
  t->add_flag("--deterministic", train.deterministic, "Omit timestamps and timings from reports");
  t->callback([&] { action = [&] { return cmd_train(train); }; });

  SimArgs simulate;
  auto* s = app.add_subcommand("simulate", "Write a synthetic mixture stream into a memory bank");
  s->add_option("config", simulate.config, "Simulation JSON config")->required();
  s->add_option("--out", simulate.out, "Output directory")->capture_default_str();
  s->add_option("--snapshot", simulate.snapshot, "Write the final bank snapshot here");
  s->add_flag("--assert", simulate.check, "Exit 1 if any oracle or expectation fails");
  s->add_flag("--deterministic", simulate.deterministic, "Omit timestamps and timings from reports");
  s->add_option("--seed", simulate.seed, "Override seed");
  s->add_option("--threshold", simulate.threshold, "Override novelty threshold R");
  s->add_option("--capacity", simulate.capacity, "Override memory size M");
  s->add_option("--window", simulate.window, "Override window length");
  s->add_option("--ablation", simulate.ablation, "Override ablation mode");
  s->callback([&] { action = [&] { return cmd_simulate(simulate); }; });

  EvalArgs eval;
  auto* e = app.add_subcommand("eval-clm", "Windowed language-model evaluation with memory");
  e->add_option("config", eval.config, "Optional JSON config");
  e->add_option("--model", eval.model, "Model JSON");
  e->add_option("--corpus", eval.corpus, "Evaluation text");
  e->add_option("--train-corpus", eval.train_corpus, "Training text for frequency buckets");
  e->add_option("--ablation", eval.ablations, "Comma list: full,no-read,no-recency,no-novelty,no-consolidation");
  e->add_option("--windows", eval.windows, "Comma list of window lengths");
  e->add_option("--layers", eval.layers, "Comma list of augmented layers");
  e->add_option("--memory", eval.memory, "Memory size M per bank");
  e->add_option("--threshold", eval.threshold, "Novelty threshold R");
  e->add_option("--similarity", eval.similarity, "cosine or euclidean");
  e->add_option("--seed", eval.seed, "Seed");
  e->add_option("--out", eval.out, "Output directory")->capture_default_str();
  e->add_option("--snapshot-dir", eval.snapshot_dir, "Write final bank snapshots here");
  e->add_flag("--slot-log", eval.slot_log, "Export per-slot token logs");
  e->add_flag("--deterministic", eval.deterministic, "Omit timestamps and timings from reports");
  e->callback([&] { action = [&] { return cmd_eval_clm(eval); }; });

  SweepArgs sweep;
  auto* w = app.add_subcommand("sweep", "Sweep one hyper-parameter axis");
  w->add_option("config", sweep.config, "eval-clm or simulate JSON config")->required();
  w->add_option("--axis", sweep.axis, "R, memory, similarity or window")->required();
  w->add_option("--values", sweep.values, "Comma list overriding the config's axis values");
  w->add_option("--out", sweep.out, "CSV output")->capture_default_str();
  w->add_flag("--deterministic", sweep.deterministic, "Omit timings");
  w->callback([&] { action = [&] { return cmd_sweep(sweep); }; });

  InspectArgs inspect;
  auto* i = app.add_subcommand("inspect", "Summarise a bank snapshot");
  i->add_option("snapshot", inspect.snapshot, "Snapshot file")->required();
  i->add_option("--top", inspect.top, "Slots to list")->capture_default_str();
  i->add_option("--labels", inspect.labels, "Slot log CSV (slot,order,label,action)");
  i->add_flag("--json", inspect.as_json, "Machine-readable output");
  i->callback([&] { action = [&] { return cmd_inspect(inspect); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsageError;
  }
  try {
    worker_count();  // rejects a malformed CAMELOT_THREADS up front
    return action();
  } catch (const CheckFailure& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kOracleFailure;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsageError;
  }
}

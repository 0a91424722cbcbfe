#pragma once

#include "camelot/memory_bank.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace camelot::cli {

using nlohmann::json;

enum ExitCode : int { kOk = 0, kOracleFailure = 1, kUsageError = 2 };

/// Bad flags, missing or unreadable inputs. Exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A check requested with --assert did not hold, or an input failed its
/// format check. Exit code 1.
struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Digest of the canonical form: sorted keys, no whitespace.
inline std::string config_digest(const json& config) { return sha256_hex(config.dump()); }

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json load_json(const std::string& path) {
  const auto text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(path + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path.string());
  out << content;
}

/// Independent seed for a named sub-stream ("train", "stream", "ablation").
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& stream) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32)};
  for (unsigned char c : stream) words.push_back(c);
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Worker count: hardware concurrency capped by CAMELOT_THREADS.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CAMELOT_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 1) throw UsageError("CAMELOT_THREADS must be a positive integer");
    n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Results must
/// be written to per-index storage so output order never depends on timing.
template <class Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ','))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

/// Bank settings from a JSON object; absent keys keep `base`.
inline BankConfig bank_from_json(const json& j, BankConfig base = {}) {
  try {
    base.capacity = j.value("capacity", base.capacity);
    base.threshold = j.value("threshold", base.threshold);
    if (j.contains("similarity")) base.similarity = parse_similarity(j.at("similarity").get<std::string>());
    if (j.contains("ablation")) base.ablation = parse_ablation(j.at("ablation").get<std::string>());
    base.seed = j.value("seed", base.seed);
    base.dedupe_reads = j.value("dedupe_reads", base.dedupe_reads);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const json::exception& e) {
    throw UsageError(std::string("bank config: ") + e.what());
  }
  return base;
}

inline json bank_to_json(const BankConfig& c) {
  return {{"capacity", c.capacity},
          {"dim", c.dim},
          {"threshold", c.threshold},
          {"similarity", std::string(to_string(c.similarity))},
          {"ablation", std::string(to_string(c.ablation))},
          {"seed", c.seed},
          {"dedupe_reads", c.dedupe_reads}};
}

}  // namespace camelot::cli

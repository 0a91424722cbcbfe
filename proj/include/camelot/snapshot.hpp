#pragma once

// Versioned little-endian bank snapshot.
//
//   "CAMB" | version u32 | dim u32 | capacity u64 | similarity u8 | ablation u8 | R f64
//   capacity x { occupied u8 | count u64 | age u64 | key dim x f64 | value dim x f64 }
//   rng: seed u64 | state length u64 | state bytes (std::mt19937_64 text form)
//   tail: dedupe u8 | clock u64 | capacity x touched_at u64

#include "camelot/memory_bank.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace camelot {

inline constexpr std::uint32_t kSnapshotVersion = 1;
inline constexpr char kSnapshotMagic[4] = {'C', 'A', 'M', 'B'};

enum class SnapshotErrc { corrupted = 1, config_mismatch = 2, version_mismatch = 3 };

class SnapshotError : public std::runtime_error {
 public:
  SnapshotError(SnapshotErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  SnapshotErrc code() const noexcept { return code_; }

 private:
  SnapshotErrc code_;
};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw SnapshotError(SnapshotErrc::corrupted, "snapshot: truncated stream");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> snapshot(const MemoryBank& bank) {
  const auto& cfg = bank.config();
  const auto& st = bank.state();
  detail::ByteWriter w;
  w.raw(kSnapshotMagic, 4);
  w.u32(kSnapshotVersion);
  w.u32(static_cast<std::uint32_t>(cfg.dim));
  w.u64(cfg.capacity);
  w.u8(static_cast<std::uint8_t>(cfg.similarity));
  w.u8(static_cast<std::uint8_t>(cfg.ablation));
  w.f64(cfg.threshold);
  for (std::size_t s = 0; s < cfg.capacity; ++s) {
    w.u8(st.occupied[s]);
    w.u64(st.counts[s]);
    w.u64(st.ages[s]);
    for (double x : bank.key(s)) w.f64(x);
    for (double x : bank.value(s)) w.f64(x);
  }
  std::ostringstream rng;
  rng << st.rng;
  const std::string rng_text = rng.str();
  w.u64(cfg.seed);
  w.u64(rng_text.size());
  w.raw(rng_text.data(), rng_text.size());
  w.u8(cfg.dedupe_reads ? 1 : 0);
  w.u64(st.clock);
  for (auto t : st.touched_at) w.u64(t);
  return w.take();
}

/// Shape the caller expects the snapshot to have.
struct SnapshotExpectation {
  std::size_t dim = 0;
  std::size_t capacity = 0;
};

inline MemoryBank restore(std::span<const std::uint8_t> bytes,
                          std::optional<SnapshotExpectation> expected = std::nullopt) {
  using detail::ByteReader;
  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kSnapshotMagic, 4) != 0)
    throw SnapshotError(SnapshotErrc::corrupted, "snapshot: bad magic");
  const auto version = r.u32();
  if (version != kSnapshotVersion)
    throw SnapshotError(SnapshotErrc::version_mismatch,
                        "snapshot: unsupported version " + std::to_string(version));

  BankConfig cfg;
  cfg.dim = r.u32();
  cfg.capacity = static_cast<std::size_t>(r.u64());
  if (expected && (expected->dim != cfg.dim || expected->capacity != cfg.capacity))
    throw SnapshotError(SnapshotErrc::config_mismatch,
                        "snapshot: expected dim " + std::to_string(expected->dim) + " capacity " +
                            std::to_string(expected->capacity) + ", found dim " + std::to_string(cfg.dim) +
                            " capacity " + std::to_string(cfg.capacity));
  const auto sim = r.u8();
  const auto abl = r.u8();
  if (sim > static_cast<std::uint8_t>(Similarity::negative_euclidean) ||
      abl > static_cast<std::uint8_t>(Ablation::no_consolidation))
    throw SnapshotError(SnapshotErrc::corrupted, "snapshot: bad similarity or ablation tag");
  cfg.similarity = static_cast<Similarity>(sim);
  cfg.ablation = static_cast<Ablation>(abl);
  cfg.threshold = r.f64();
  if (cfg.dim == 0 || cfg.capacity == 0 || !(cfg.threshold >= -1.0 && cfg.threshold <= 1.0))
    throw SnapshotError(SnapshotErrc::corrupted, "snapshot: invalid header");
  // Guard the allocation below against absurd headers.
  const std::size_t record = 17 + 16 * cfg.dim;
  if (cfg.capacity > r.remaining() / record)
    throw SnapshotError(SnapshotErrc::corrupted, "snapshot: truncated slot records");

  BankState st;
  st.keys.resize(cfg.capacity * cfg.dim);
  st.values.resize(cfg.capacity * cfg.dim);
  st.counts.resize(cfg.capacity);
  st.ages.resize(cfg.capacity);
  st.occupied.resize(cfg.capacity);
  for (std::size_t s = 0; s < cfg.capacity; ++s) {
    st.occupied[s] = r.u8();
    if (st.occupied[s] > 1) throw SnapshotError(SnapshotErrc::corrupted, "snapshot: bad occupancy flag");
    st.counts[s] = r.u64();
    st.ages[s] = r.u64();
    for (std::size_t j = 0; j < cfg.dim; ++j) st.keys[s * cfg.dim + j] = r.f64();
    for (std::size_t j = 0; j < cfg.dim; ++j) st.values[s * cfg.dim + j] = r.f64();
  }
  cfg.seed = r.u64();
  const auto rng_len = r.u64();
  if (rng_len > r.remaining()) throw SnapshotError(SnapshotErrc::corrupted, "snapshot: truncated rng state");
  std::string rng_text(static_cast<std::size_t>(rng_len), '\0');
  r.raw(rng_text.data(), rng_text.size());
  std::istringstream rng_in(rng_text);
  rng_in >> st.rng;
  if (!rng_in) throw SnapshotError(SnapshotErrc::corrupted, "snapshot: bad rng state");
  const auto dedupe = r.u8();
  if (dedupe > 1) throw SnapshotError(SnapshotErrc::corrupted, "snapshot: bad dedupe flag");
  cfg.dedupe_reads = dedupe == 1;
  st.clock = r.u64();
  st.touched_at.resize(cfg.capacity);
  for (auto& t : st.touched_at) t = r.u64();
  if (r.remaining() != 0) throw SnapshotError(SnapshotErrc::corrupted, "snapshot: trailing bytes");

  try {
    return MemoryBank::from_state(cfg, std::move(st));
  } catch (const std::invalid_argument& e) {
    throw SnapshotError(SnapshotErrc::corrupted, std::string("snapshot: ") + e.what());
  }
}

inline void save_snapshot(const MemoryBank& bank, const std::string& path) {
  const auto bytes = snapshot(bank);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace camelot

#pragma once

#include "camelot/memory_bank.hpp"

#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace camelot {

/// Which tokens landed in which slot over time. A replaced slot starts a
/// fresh history with the token that evicted it.
class SlotLog {
 public:
  struct Entry {
    std::string label;
    WriteAction action;
  };

  explicit SlotLog(std::size_t capacity) : history_(capacity) {}

  void record(const WriteReport& report, const std::vector<std::string>& labels) {
    if (labels.size() != report.per_token_slot.size())
      throw std::invalid_argument("SlotLog: one label per written token required");
    for (const auto& t : report.per_token_slot) {
      auto& h = history_.at(t.slot);
      if (t.action != WriteAction::consolidate) h.clear();
      h.push_back({labels[t.position], t.action});
    }
  }

  const std::vector<Entry>& history(std::size_t slot) const { return history_.at(slot); }
  std::size_t capacity() const { return history_.size(); }

  std::vector<std::string> labels(std::size_t slot) const {
    std::vector<std::string> out;
    for (const auto& e : history_.at(slot)) out.push_back(e.label);
    return out;
  }

  void write_csv(std::ostream& os) const {
    os << "slot,order,label,action\n";
    for (std::size_t s = 0; s < history_.size(); ++s)
      for (std::size_t k = 0; k < history_[s].size(); ++k)
        os << s << ',' << k << ',' << csv_field(history_[s][k].label) << ',' << to_string(history_[s][k].action)
           << '\n';
  }

 private:
  static std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
      if (c == '"') out += '"';
      out += c;
    }
    return out + '"';
  }

  std::vector<std::vector<Entry>> history_;
};

}  // namespace camelot

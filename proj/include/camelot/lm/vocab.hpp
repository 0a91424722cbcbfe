#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace camelot::lm {

using TokenId = int;

inline std::vector<char32_t> utf8_decode(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    int extra = 0;
    char32_t cp = 0;
    if (c < 0x80) {
      cp = c;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1F, extra = 1;
    } else if ((c >> 4) == 0xE) {
      cp = c & 0x0F, extra = 2;
    } else if ((c >> 3) == 0x1E) {
      cp = c & 0x07, extra = 3;
    } else {
      throw std::invalid_argument("utf8_decode: invalid lead byte");
    }
    if (i + static_cast<std::size_t>(extra) >= s.size())
      throw std::invalid_argument("utf8_decode: truncated sequence");
    for (int k = 1; k <= extra; ++k) {
      const auto b = static_cast<unsigned char>(s[i + static_cast<std::size_t>(k)]);
      if ((b >> 6) != 0x2) throw std::invalid_argument("utf8_decode: invalid continuation byte");
      cp = (cp << 6) | (b & 0x3F);
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(extra) + 1;
  }
  return out;
}

inline std::string utf8_encode(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

/// Character vocabulary: sorted distinct code points of the training text.
class CharVocab {
 public:
  CharVocab() = default;
  explicit CharVocab(std::vector<char32_t> symbols) : symbols_(std::move(symbols)) {
    std::sort(symbols_.begin(), symbols_.end());
    symbols_.erase(std::unique(symbols_.begin(), symbols_.end()), symbols_.end());
    for (std::size_t i = 0; i < symbols_.size(); ++i) index_[symbols_[i]] = static_cast<TokenId>(i);
  }

  static CharVocab from_text(std::string_view text) { return CharVocab(utf8_decode(text)); }

  std::size_t size() const { return symbols_.size(); }
  const std::vector<char32_t>& symbols() const { return symbols_; }

  bool contains(char32_t cp) const { return index_.count(cp) != 0; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (char32_t cp : utf8_decode(text)) {
      auto it = index_.find(cp);
      if (it == index_.end())
        throw std::out_of_range("CharVocab: character U+" + hex(cp) + " is not in the vocabulary");
      ids.push_back(it->second);
    }
    return ids;
  }

  std::string decode(TokenId id) const { return utf8_encode(symbols_.at(static_cast<std::size_t>(id))); }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string s;
    for (auto id : ids) s += decode(id);
    return s;
  }

 private:
  static std::string hex(char32_t cp) {
    static const char* digits = "0123456789ABCDEF";
    std::string s;
    for (int shift = 12; shift >= 0; shift -= 4) s += digits[(cp >> shift) & 0xF];
    return s;
  }

  std::vector<char32_t> symbols_;
  std::map<char32_t, TokenId> index_;
};

}  // namespace camelot::lm

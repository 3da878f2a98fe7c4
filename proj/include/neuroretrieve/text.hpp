#pragma once

#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace nr {

/// Lowercases ASCII letters and drops ASCII punctuation; other bytes (UTF-8
/// continuation bytes included) pass through unchanged.
inline std::string normalize_token(std::string_view token) {
  std::string out;
  out.reserve(token.size());
  for (unsigned char c : token) {
    if (c < 0x80 && std::ispunct(c)) continue;
    out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
  }
  return out;
}

/// Whitespace split followed by normalize_token; empty results are dropped.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      auto t = normalize_token(text.substr(i, j - i));
      if (!t.empty()) tokens.push_back(std::move(t));
    }
    i = j;
  }
  return tokens;
}

/// Normalizes each already-split word, dropping those that become empty.
inline std::vector<std::string> normalize_tokens(const std::vector<std::string>& words) {
  std::vector<std::string> out;
  out.reserve(words.size());
  for (const auto& w : words) {
    auto t = normalize_token(w);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace nr

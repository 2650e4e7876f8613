#pragma once

#include <cctype>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/rng.hpp"

namespace cmfuse {

// Reserved token ids. Hashed word ids start at kNumReservedIds.
inline constexpr std::size_t kClsId = 0;
inline constexpr std::size_t kPadId = 1;
inline constexpr std::size_t kNumReservedIds = 2;

struct TokenSequence {
  std::vector<std::size_t> ids;  // padded to max_text_len; ids[0] is CLS
  std::size_t length = 0;        // real (non-pad) tokens, CLS included
  std::size_t vocab_size = 0;
};

// Lowercase and drop everything that is not alphanumeric, so "T-Shirt"
// normalizes to the single word "tshirt".
inline std::string normalize_token(const std::string& word) {
  std::string out;
  out.reserve(word.size());
  for (unsigned char c : word) {
    if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      std::string norm = normalize_token(current);
      if (!norm.empty()) words.push_back(std::move(norm));
      current.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else {
      current.push_back(static_cast<char>(c));
    }
  }
  flush();
  return words;
}

inline std::size_t hashed_token_id(const std::string& normalized_word, std::size_t vocab_size) {
  if (vocab_size <= kNumReservedIds) {
    throw std::invalid_argument("hashed_token_id: vocab_size must exceed " +
                                std::to_string(kNumReservedIds));
  }
  return kNumReservedIds + fnv1a64(normalized_word) % (vocab_size - kNumReservedIds);
}

// Deterministic hashing tokenizer: lowercase, whitespace-split with in-word
// punctuation stripped, each word hashed into [kNumReservedIds, vocab_size),
// CLS prepended, truncated and padded to max_text_len.
inline TokenSequence tokenize(const std::string& text, std::size_t vocab_size,
                              std::size_t max_text_len) {
  if (max_text_len == 0) throw std::invalid_argument("tokenize: max_text_len must be >= 1");
  TokenSequence seq;
  seq.vocab_size = vocab_size;
  seq.ids.assign(max_text_len, kPadId);
  seq.ids[0] = kClsId;
  seq.length = 1;
  for (const std::string& word : split_words(text)) {
    if (seq.length >= max_text_len) break;
    seq.ids[seq.length] = hashed_token_id(word, vocab_size);
    seq.length += 1;
  }
  return seq;
}

}  // namespace cmfuse

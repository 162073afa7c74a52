// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace clinlm::bpe {

// Suffix marking the final symbol of a word, as in classic subword BPE.
inline constexpr std::string_view kEndOfWord = "</w>";

inline constexpr std::string_view kPad = "[PAD]";
inline constexpr std::string_view kUnk = "[UNK]";
inline constexpr std::string_view kCls = "[CLS]";
inline constexpr std::string_view kSep = "[SEP]";
inline constexpr std::string_view kMask = "[MASK]";
inline constexpr std::string_view kS1 = "[S1]";
inline constexpr std::string_view kE1 = "[E1]";
inline constexpr std::string_view kS2 = "[S2]";
inline constexpr std::string_view kE2 = "[E2]";

std::vector<std::string> default_specials();

struct Encoding {
  std::vector<std::int32_t> ids;
  // Half-open byte offsets into the encoded text, one pair per id.
  std::vector<std::pair<std::size_t, std::size_t>> offsets;
};

// Trained BPE vocabulary. Ids are laid out as specials, then the base
// alphabet in byte order, then one token per merge in training order.
//
// Text is pre-split on ASCII whitespace. A single space between two words is
// implied; any other whitespace is emitted as explicit whitespace tokens, so
// decode(encode(text)) reproduces `text` byte for byte when no character
// falls outside the alphabet.
class Vocabulary {
 public:
  Vocabulary() = default;

  std::size_t size() const { return id_to_token_.size(); }
  std::size_t alphabet_size() const { return alphabet_.size(); }
  const std::vector<std::string>& specials() const { return specials_; }
  const std::vector<std::string>& alphabet() const { return alphabet_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  std::optional<std::int32_t> find(std::string_view token) const;
  // Throws ValueError when the token is absent.
  std::int32_t id(std::string_view token) const;
  const std::string& token(std::int32_t id) const;
  bool is_special(std::int32_t id) const { return id >= 0 && static_cast<std::size_t>(id) < specials_.size(); }

  std::int32_t pad_id() const { return pad_id_; }
  std::int32_t unk_id() const { return unk_id_; }
  std::int32_t cls_id() const { return cls_id_; }
  std::int32_t sep_id() const { return sep_id_; }
  std::int32_t mask_id() const { return mask_id_; }

  Encoding encode(std::string_view text) const;
  // Ids for one whitespace-free word; a special-token literal maps to its id.
  std::vector<std::int32_t> encode_word(std::string_view word) const;
  // [PAD] is dropped; other specials render literally. Throws ValueError on
  // an out-of-range id.
  std::string decode(std::span<const std::int32_t> ids) const;

  // Vocabulary keeping only the first vocab_size - |specials| - |alphabet|
  // merges.
  Vocabulary truncated(std::size_t vocab_size) const;

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);

  // Assembles a vocabulary from its parts; used by training and parsing.
  static Vocabulary assemble(std::vector<std::string> specials, std::vector<std::string> alphabet,
                             std::vector<std::pair<std::string, std::string>> merges);

 private:
  struct PairHash {
    std::size_t operator()(std::uint64_t k) const { return std::hash<std::uint64_t>{}(k); }
  };
  static std::uint64_t pair_key(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }
  // Appends ids and offsets for `word` located at byte `base`.
  void encode_word_into(std::string_view word, std::size_t base, Encoding& out) const;

  std::vector<std::string> specials_;
  std::vector<std::string> alphabet_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  // (left id, right id) -> (merge rank, merged id)
  std::unordered_map<std::uint64_t, std::pair<std::int32_t, std::int32_t>, PairHash> merge_table_;
  std::int32_t pad_id_ = -1, unk_id_ = -1, cls_id_ = -1, sep_id_ = -1, mask_id_ = -1;
};

// Greedy BPE over whitespace-split words of `lines`. The most frequent
// adjacent pair is merged first; ties go to the lexicographically smaller
// (left, right) pair. A pair whose concatenation already exists as a token is
// never selected. Training stops early when no pair remains. Words equal to
// a special literal are excluded. Throws ConfigError when vocab_size cannot
// hold the specials plus the base alphabet.
Vocabulary train_bpe(std::span<const std::string> lines, std::size_t vocab_size,
                     std::vector<std::string> specials = default_specials());

// Per-word memo over a shared vocabulary, for bulk corpus encoding.
class WordCache {
 public:
  explicit WordCache(const Vocabulary& vocab) : vocab_(vocab) {}
  const std::vector<std::int32_t>& word(std::string_view w);
  // Encodes whitespace-separated words, ignoring all whitespace tokens.
  std::vector<std::int32_t> words(std::string_view text);

 private:
  const Vocabulary& vocab_;
  std::unordered_map<std::string, std::vector<std::int32_t>> cache_;
};

// Splits a UTF-8 string into code point substrings. Invalid bytes become
// single-byte entries.
std::vector<std::string_view> utf8_chars(std::string_view s);

}  // namespace clinlm::bpe

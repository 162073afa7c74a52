// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace clinlm::corpus {

// Drops malformed UTF-8, decodes HTML entities (repeatedly, so "&amp;lt;"
// becomes "<"), and maps non-breaking spaces to ' '. A lone 0xA0 byte is
// read as the Latin-1 non-breaking space rather than dropped. Idempotent.
std::string normalize_text(std::string_view raw);

// True when `s` is well-formed UTF-8 with no surrogates or overlong forms.
bool valid_utf8(std::string_view s);

// Lowercased words, without the trailing period, that never end a sentence.
class Abbreviations {
 public:
  Abbreviations();  // clinical defaults
  explicit Abbreviations(std::set<std::string> words) : words_(std::move(words)) {}
  static Abbreviations parse(std::string_view text);  // one word per line, '#' comments

  // `word` is the whitespace-delimited token ending in '.'.
  bool contains(std::string_view word) const;
  const std::set<std::string>& words() const { return words_; }

 private:
  std::set<std::string> words_;
};

// A sentence ends after '.', '!' or '?' (plus closing quotes or brackets) that
// is followed by whitespace and an uppercase letter or a "[**" dummy token,
// unless the word ending in '.' is an abbreviation or a single initial.
// Sentences are trimmed; whitespace-only input gives no sentences.
std::vector<std::string> split_sentences(std::string_view text, const Abbreviations& abbrev = Abbreviations());

// Whitespace split, then leading and trailing punctuation peeled into separate
// tokens. Dummy PHI tokens and abbreviations stay whole.
std::vector<std::string> tokenize(std::string_view sentence, const Abbreviations& abbrev = Abbreviations());

}  // namespace clinlm::corpus

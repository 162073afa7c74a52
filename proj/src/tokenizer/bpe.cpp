// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/tokenizer/bpe.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <sstream>

#include "clinlm/common/error.hpp"

namespace clinlm::bpe {
namespace {

constexpr std::string_view kHeader = "bpe-v1";
constexpr std::string_view kAlphabetTag = "#alphabet";
constexpr std::string_view kMergesTag = "#merges";
constexpr std::string_view kWhitespaceSymbols[] = {" ", "\t", "\n", "\r"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

bool ends_with_eow(std::string_view s) { return s.size() >= kEndOfWord.size() && s.ends_with(kEndOfWord); }

struct Piece {
  std::string_view text;
  std::size_t begin;  // byte offset of the piece in the source
};

// Splits into maximal runs of non-space bytes.
std::vector<Piece> split_words(std::string_view text) {
  std::vector<Piece> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.push_back({text.substr(i, j - i), i});
    i = j;
  }
  return out;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case ' ': out += "\\s"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw SchemaError("vocabulary: dangling escape in '" + std::string(s) + "'");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 's': out += ' '; break;
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      default: throw SchemaError("vocabulary: unknown escape in '" + std::string(s) + "'");
    }
  }
  return out;
}

std::size_t parse_count(std::string_view s, std::string_view what) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw SchemaError("vocabulary: bad " + std::string(what) + " '" + std::string(s) + "'");
  return v;
}

}  // namespace

std::vector<std::string> default_specials() {
  return {std::string(kPad), std::string(kUnk), std::string(kCls), std::string(kSep), std::string(kMask),
          std::string(kS1),  std::string(kE1),  std::string(kS2),  std::string(kE2)};
}

std::vector<std::string_view> utf8_chars(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t n = std::min(utf8_length(static_cast<unsigned char>(s[i])), s.size() - i);
    out.push_back(s.substr(i, n));
    i += n;
  }
  return out;
}

Vocabulary Vocabulary::assemble(std::vector<std::string> specials, std::vector<std::string> alphabet,
                                std::vector<std::pair<std::string, std::string>> merges) {
  Vocabulary v;
  v.specials_ = std::move(specials);
  v.alphabet_ = std::move(alphabet);
  v.merges_ = std::move(merges);
  auto add = [&v](const std::string& tok) {
    if (tok.empty()) throw SchemaError("vocabulary: empty token");
    auto [it, fresh] = v.token_to_id_.emplace(tok, static_cast<std::int32_t>(v.id_to_token_.size()));
    if (!fresh) throw SchemaError("vocabulary: duplicate token '" + escape(tok) + "'");
    v.id_to_token_.push_back(tok);
    return it->second;
  };
  for (const auto& s : v.specials_) add(s);
  for (const auto& a : v.alphabet_) add(a);
  for (std::size_t r = 0; r < v.merges_.size(); ++r) {
    const auto& [l, rr] = v.merges_[r];
    auto li = v.token_to_id_.find(l), ri = v.token_to_id_.find(rr);
    if (li == v.token_to_id_.end() || ri == v.token_to_id_.end())
      throw SchemaError("vocabulary: merge " + std::to_string(r) + " uses an unknown symbol");
    if (v.is_special(li->second) || v.is_special(ri->second))
      throw SchemaError("vocabulary: merge " + std::to_string(r) + " involves a special token");
    std::int32_t lid = li->second, rid = ri->second;
    std::int32_t merged = add(l + rr);
    v.merge_table_.emplace(pair_key(lid, rid), std::pair{static_cast<std::int32_t>(r), merged});
  }
  auto special = [&v](std::string_view name) {
    auto it = v.token_to_id_.find(std::string(name));
    return it != v.token_to_id_.end() && v.is_special(it->second) ? it->second : -1;
  };
  v.pad_id_ = special(kPad);
  v.unk_id_ = special(kUnk);
  v.cls_id_ = special(kCls);
  v.sep_id_ = special(kSep);
  v.mask_id_ = special(kMask);
  if (v.unk_id_ < 0) throw SchemaError("vocabulary: specials must include [UNK]");
  return v;
}

std::optional<std::int32_t> Vocabulary::find(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

std::int32_t Vocabulary::id(std::string_view token) const {
  auto found = find(token);
  if (!found) throw ValueError("token '" + escape(token) + "' is not in the vocabulary");
  return *found;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
    throw ValueError("token id " + std::to_string(id) + " out of range [0, " + std::to_string(size()) + ")");
  return id_to_token_[static_cast<std::size_t>(id)];
}

void Vocabulary::encode_word_into(std::string_view word, std::size_t base, Encoding& out) const {
  if (auto it = token_to_id_.find(std::string(word)); it != token_to_id_.end() && is_special(it->second)) {
    out.ids.push_back(it->second);
    out.offsets.emplace_back(base, base + word.size());
    return;
  }
  auto chars = utf8_chars(word);
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> begins;
  ids.reserve(chars.size());
  std::size_t pos = 0;
  std::string sym;
  for (std::size_t i = 0; i < chars.size(); ++i) {
    sym.assign(chars[i]);
    if (i + 1 == chars.size()) sym += kEndOfWord;
    auto it = token_to_id_.find(sym);
    ids.push_back(it == token_to_id_.end() || is_special(it->second) ? unk_id_ : it->second);
    begins.push_back(pos);
    pos += chars[i].size();
  }
  while (ids.size() > 1) {
    std::int32_t best_rank = -1, merged = -1;
    std::uint64_t best_key = 0;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      auto it = merge_table_.find(pair_key(ids[i], ids[i + 1]));
      if (it != merge_table_.end() && (best_rank < 0 || it->second.first < best_rank)) {
        best_rank = it->second.first;
        merged = it->second.second;
        best_key = it->first;
      }
    }
    if (best_rank < 0) break;
    std::size_t w = 0;
    for (std::size_t i = 0; i < ids.size(); ++w) {
      if (i + 1 < ids.size() && pair_key(ids[i], ids[i + 1]) == best_key) {
        ids[w] = merged;
        begins[w] = begins[i];
        i += 2;
      } else {
        ids[w] = ids[i];
        begins[w] = begins[i];
        i += 1;
      }
    }
    ids.resize(w);
    begins.resize(w);
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::size_t end = i + 1 < ids.size() ? begins[i + 1] : word.size();
    out.ids.push_back(ids[i]);
    out.offsets.emplace_back(base + begins[i], base + end);
  }
}

std::vector<std::int32_t> Vocabulary::encode_word(std::string_view word) const {
  Encoding enc;
  encode_word_into(word, 0, enc);
  return enc.ids;
}

Encoding Vocabulary::encode(std::string_view text) const {
  Encoding out;
  auto emit_space = [&](std::size_t from, std::size_t to) {
    for (std::size_t k = from; k < to; ++k) {
      auto it = token_to_id_.find(std::string(1, text[k]));
      out.ids.push_back(it == token_to_id_.end() ? unk_id_ : it->second);
      out.offsets.emplace_back(k, k + 1);
    }
  };
  auto words = split_words(text);
  std::size_t cursor = 0;
  for (std::size_t w = 0; w < words.size(); ++w) {
    std::size_t gap = words[w].begin - cursor;
    bool implied = w > 0 && gap == 1 && text[cursor] == ' ';
    if (!implied) emit_space(cursor, words[w].begin);
    encode_word_into(words[w].text, words[w].begin, out);
    cursor = words[w].begin + words[w].text.size();
  }
  emit_space(cursor, text.size());
  return out;
}

std::string Vocabulary::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  bool pending_space = false;
  for (std::int32_t id : ids) {
    const std::string& tok = token(id);
    if (id == pad_id_) continue;
    if (is_special(id)) {
      if (pending_space) out += ' ';
      out += tok;
      pending_space = true;
      continue;
    }
    if (tok.size() == 1 && is_space(tok[0])) {
      out += tok;
      pending_space = false;
      continue;
    }
    if (pending_space) out += ' ';
    if (ends_with_eow(tok)) {
      out.append(tok, 0, tok.size() - kEndOfWord.size());
      pending_space = true;
    } else {
      out += tok;
      pending_space = false;
    }
  }
  return out;
}

Vocabulary Vocabulary::truncated(std::size_t vocab_size) const {
  std::size_t base = specials_.size() + alphabet_.size();
  if (vocab_size < base)
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is below the minimum " + std::to_string(base));
  std::size_t keep = std::min(vocab_size - base, merges_.size());
  return assemble(specials_, alphabet_, {merges_.begin(), merges_.begin() + static_cast<std::ptrdiff_t>(keep)});
}

std::string Vocabulary::serialize() const {
  std::string out;
  out += std::string(kHeader) + " " + std::to_string(size()) + "\n";
  for (const auto& s : specials_) out += escape(s) + "\n";
  out += std::string(kAlphabetTag) + " " + std::to_string(alphabet_.size()) + "\n";
  for (const auto& a : alphabet_) out += escape(a) + "\n";
  out += std::string(kMergesTag) + " " + std::to_string(merges_.size()) + "\n";
  for (const auto& [l, r] : merges_) out += escape(l) + " " + escape(r) + "\n";
  return out;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::vector<std::string_view> lines;
  for (std::size_t i = 0; i < text.size();) {
    std::size_t j = text.find('\n', i);
    if (j == std::string_view::npos) j = text.size();
    lines.push_back(text.substr(i, j - i));
    i = j + 1;
  }
  if (lines.empty() || !lines[0].starts_with(std::string(kHeader) + " "))
    throw SchemaError("vocabulary: missing 'bpe-v1 <size>' header");
  std::size_t declared = parse_count(lines[0].substr(kHeader.size() + 1), "vocabulary size");
  std::size_t i = 1;
  std::vector<std::string> specials;
  while (i < lines.size() && !lines[i].starts_with(kAlphabetTag)) specials.push_back(unescape(lines[i++]));
  if (i == lines.size()) throw SchemaError("vocabulary: missing #alphabet section");
  std::size_t n_alpha = parse_count(lines[i].substr(std::min(lines[i].size(), kAlphabetTag.size() + 1)), "alphabet count");
  ++i;
  if (i + n_alpha >= lines.size() + 1) throw SchemaError("vocabulary: truncated alphabet section");
  std::vector<std::string> alphabet;
  for (std::size_t k = 0; k < n_alpha; ++k) alphabet.push_back(unescape(lines[i++]));
  if (i == lines.size() || !lines[i].starts_with(kMergesTag)) throw SchemaError("vocabulary: missing #merges section");
  std::size_t n_merges = parse_count(lines[i].substr(std::min(lines[i].size(), kMergesTag.size() + 1)), "merge count");
  ++i;
  std::vector<std::pair<std::string, std::string>> merges;
  for (std::size_t k = 0; k < n_merges; ++k, ++i) {
    if (i >= lines.size()) throw SchemaError("vocabulary: truncated merges section");
    auto sp = lines[i].find(' ');
    if (sp == std::string_view::npos || lines[i].find(' ', sp + 1) != std::string_view::npos)
      throw SchemaError("vocabulary: merge line " + std::to_string(i + 1) + " is not 'left right'");
    merges.emplace_back(unescape(lines[i].substr(0, sp)), unescape(lines[i].substr(sp + 1)));
  }
  for (; i < lines.size(); ++i)
    if (!lines[i].empty()) throw SchemaError("vocabulary: trailing content at line " + std::to_string(i + 1));
  Vocabulary v = assemble(std::move(specials), std::move(alphabet), std::move(merges));
  if (v.size() != declared)
    throw SchemaError("vocabulary: header declares " + std::to_string(declared) + " tokens, found " +
                      std::to_string(v.size()));
  return v;
}

Vocabulary train_bpe(std::span<const std::string> lines, std::size_t vocab_size, std::vector<std::string> specials) {
  std::set<std::string> special_set(specials.begin(), specials.end());
  if (special_set.size() != specials.size()) throw ConfigError("duplicate special tokens");
  if (!special_set.count(std::string(kUnk))) throw ConfigError("specials must include [UNK]");

  std::map<std::string, std::int64_t> word_counts;
  for (const auto& line : lines)
    for (const auto& w : split_words(line))
      if (!special_set.count(std::string(w.text))) ++word_counts[std::string(w.text)];

  // Every observed character gets both a word-internal and a word-final symbol.
  std::set<std::string> alpha_set(std::begin(kWhitespaceSymbols), std::end(kWhitespaceSymbols));
  for (const auto& [w, c] : word_counts)
    for (auto ch : utf8_chars(w)) {
      alpha_set.emplace(ch);
      alpha_set.emplace(std::string(ch) + std::string(kEndOfWord));
    }
  for (const auto& s : specials) alpha_set.erase(s);
  std::vector<std::string> alphabet(alpha_set.begin(), alpha_set.end());

  std::size_t base = specials.size() + alphabet.size();
  if (vocab_size < base)
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " too small; need at least " +
                      std::to_string(base) + " (" + std::to_string(specials.size()) + " specials + " +
                      std::to_string(alphabet.size()) + " alphabet symbols)");

  std::vector<std::string> tokens(specials.begin(), specials.end());
  tokens.insert(tokens.end(), alphabet.begin(), alphabet.end());
  std::unordered_map<std::string, std::int32_t> index;
  for (std::size_t i = 0; i < tokens.size(); ++i) index.emplace(tokens[i], static_cast<std::int32_t>(i));

  struct Word {
    std::vector<std::int32_t> syms;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) {
    auto chars = utf8_chars(w);
    Word word{{}, c};
    for (std::size_t i = 0; i < chars.size(); ++i) {
      std::string s(chars[i]);
      if (i + 1 == chars.size()) s += kEndOfWord;
      word.syms.push_back(index.at(s));
    }
    words.push_back(std::move(word));
  }

  auto key = [](std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  };
  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;
  auto add_pairs = [&](std::uint32_t wi, std::int64_t sign) {
    const Word& w = words[wi];
    for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
      auto k = key(w.syms[i], w.syms[i + 1]);
      auto& c = counts[k];
      c += sign * w.count;
      if (c == 0) counts.erase(k);
      if (sign > 0) where[k].push_back(wi);
    }
  };
  for (std::uint32_t wi = 0; wi < words.size(); ++wi) add_pairs(wi, +1);

  std::vector<std::pair<std::string, std::string>> merges;
  std::vector<std::uint32_t> stamp(words.size(), 0);
  std::uint32_t epoch = 0;
  while (base + merges.size() < vocab_size) {
    std::uint64_t best = 0;
    std::int64_t best_count = 0;
    for (const auto& [k, c] : counts) {
      if (c < best_count) continue;
      const std::string& l = tokens[k >> 32];
      const std::string& r = tokens[k & 0xffffffffu];
      if (c == best_count) {
        const std::string& bl = tokens[best >> 32];
        const std::string& br = tokens[best & 0xffffffffu];
        if (std::tie(l, r) >= std::tie(bl, br)) continue;
      }
      if (index.count(l + r)) continue;
      best = k;
      best_count = c;
    }
    if (best_count == 0) break;

    auto a = static_cast<std::int32_t>(best >> 32), b = static_cast<std::int32_t>(best & 0xffffffffu);
    auto merged = static_cast<std::int32_t>(tokens.size());
    tokens.push_back(tokens[a] + tokens[b]);
    index.emplace(tokens.back(), merged);
    merges.emplace_back(tokens[a], tokens[b]);

    ++epoch;
    std::vector<std::uint32_t> touched = std::move(where[best]);
    where.erase(best);
    for (std::uint32_t wi : touched) {
      if (stamp[wi] == epoch) continue;
      stamp[wi] = epoch;
      Word& w = words[wi];
      bool present = false;
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i)
        if (w.syms[i] == a && w.syms[i + 1] == b) present = true;
      if (!present) continue;
      add_pairs(wi, -1);
      std::size_t o = 0;
      for (std::size_t i = 0; i < w.syms.size(); ++o) {
        if (i + 1 < w.syms.size() && w.syms[i] == a && w.syms[i + 1] == b) {
          w.syms[o] = merged;
          i += 2;
        } else {
          w.syms[o] = w.syms[i];
          i += 1;
        }
      }
      w.syms.resize(o);
      add_pairs(wi, +1);
    }
  }
  return Vocabulary::assemble(std::move(specials), std::move(alphabet), std::move(merges));
}

const std::vector<std::int32_t>& WordCache::word(std::string_view w) {
  auto it = cache_.find(std::string(w));
  if (it != cache_.end()) return it->second;
  return cache_.emplace(std::string(w), vocab_.encode_word(w)).first->second;
}

std::vector<std::int32_t> WordCache::words(std::string_view text) {
  std::vector<std::int32_t> out;
  for (const auto& p : split_words(text)) {
    const auto& ids = word(p.text);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

}  // namespace clinlm::bpe

// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/corpus/text.hpp"

#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <sstream>
#include <unordered_map>

namespace clinlm::corpus {
namespace {

void append_utf8(std::string& out, char32_t cp) {
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
}

bool encodable(char32_t cp) { return cp <= 0x10FFFF && !(cp >= 0xD800 && cp <= 0xDFFF) && cp != 0; }

// Decodes one code point at s[i]; returns its length or 0 when malformed.
std::size_t decode_at(std::string_view s, std::size_t i, char32_t& cp) {
  auto b = [&](std::size_t k) { return static_cast<unsigned char>(s[i + k]); };
  unsigned char lead = b(0);
  std::size_t n;
  char32_t min;
  if (lead < 0x80) {
    cp = lead;
    return 1;
  } else if ((lead & 0xE0) == 0xC0) {
    n = 2, cp = lead & 0x1F, min = 0x80;
  } else if ((lead & 0xF0) == 0xE0) {
    n = 3, cp = lead & 0x0F, min = 0x800;
  } else if ((lead & 0xF8) == 0xF0) {
    n = 4, cp = lead & 0x07, min = 0x10000;
  } else {
    return 0;
  }
  if (i + n > s.size()) return 0;
  for (std::size_t k = 1; k < n; ++k) {
    if ((b(k) & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (b(k) & 0x3F);
  }
  if (cp < min || !encodable(cp)) return 0;
  return n;
}

bool is_nbsp(char32_t cp) { return cp == 0xA0 || cp == 0x2007 || cp == 0x202F; }

// Well-formed UTF-8 with spaces substituted for non-breaking spaces.
std::string sanitize(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    char32_t cp;
    std::size_t n = decode_at(s, i, cp);
    if (n == 0) {
      if (static_cast<unsigned char>(s[i]) == 0xA0) out += ' ';
      ++i;
      continue;
    }
    if (is_nbsp(cp)) {
      out += ' ';
    } else if (cp != 0) {
      out.append(s.substr(i, n));
    }
    i += n;
  }
  return out;
}

const std::unordered_map<std::string_view, char32_t>& named_entities() {
  static const std::unordered_map<std::string_view, char32_t> table = {
      {"amp", '&'},       {"lt", '<'},         {"gt", '>'},         {"quot", '"'},       {"apos", '\''},
      {"nbsp", 0xA0},     {"ndash", 0x2013},   {"mdash", 0x2014},   {"lsquo", 0x2018},   {"rsquo", 0x2019},
      {"ldquo", 0x201C},  {"rdquo", 0x201D},   {"hellip", 0x2026},  {"deg", 0xB0},       {"plusmn", 0xB1},
      {"micro", 0xB5},    {"times", 0xD7},     {"divide", 0xF7},    {"copy", 0xA9},      {"reg", 0xAE},
      {"frac12", 0xBD},   {"frac14", 0xBC},    {"frac34", 0xBE},    {"sup2", 0xB2},      {"sup3", 0xB3},
      {"middot", 0xB7},   {"bull", 0x2022},    {"le", 0x2264},      {"ge", 0x2265},      {"ne", 0x2260},
      {"larr", 0x2190},   {"rarr", 0x2192},    {"uarr", 0x2191},    {"darr", 0x2193},    {"beta", 0x3B2},
      {"alpha", 0x3B1},   {"mu", 0x3BC},       {"laquo", 0xAB},     {"raquo", 0xBB},     {"sect", 0xA7},
      {"para", 0xB6},     {"cent", 0xA2},      {"pound", 0xA3},     {"euro", 0x20AC},    {"trade", 0x2122},
  };
  return table;
}

std::optional<char32_t> parse_entity(std::string_view body) {
  if (body.size() >= 2 && body[0] == '#') {
    bool hex = body[1] == 'x' || body[1] == 'X';
    std::string_view digits = body.substr(hex ? 2 : 1);
    if (digits.empty() || digits.size() > 8) return std::nullopt;
    char32_t v = 0;
    for (char c : digits) {
      int d;
      if (c >= '0' && c <= '9') d = c - '0';
      else if (hex && c >= 'a' && c <= 'f') d = c - 'a' + 10;
      else if (hex && c >= 'A' && c <= 'F') d = c - 'A' + 10;
      else return std::nullopt;
      v = v * (hex ? 16 : 10) + static_cast<char32_t>(d);
    }
    return v;
  }
  auto it = named_entities().find(body);
  if (it == named_entities().end()) return std::nullopt;
  return it->second;
}

std::string decode_entities(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '&') {
      std::size_t semi = s.find(';', i + 1);
      if (semi != std::string_view::npos && semi - i <= 12) {
        if (auto cp = parse_entity(s.substr(i + 1, semi - i - 1))) {
          // Undecodable code points are dropped, like malformed bytes.
          if (encodable(*cp)) append_utf8(out, *cp);
          i = semi;
          continue;
        }
      }
    }
    out += s[i];
  }
  return out;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool closing(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

bool is_dummy_start(std::string_view s) { return s.starts_with("[**"); }

}  // namespace

bool valid_utf8(std::string_view s) {
  for (std::size_t i = 0; i < s.size();) {
    char32_t cp;
    std::size_t n = decode_at(s, i, cp);
    if (n == 0) return false;
    i += n;
  }
  return true;
}

std::string normalize_text(std::string_view raw) {
  std::string cur = sanitize(raw);
  for (;;) {
    std::string next = sanitize(decode_entities(cur));
    if (next == cur) return cur;
    cur = std::move(next);
  }
}

Abbreviations::Abbreviations()
    : words_{"dr",    "mr",   "mrs",  "ms",    "prof", "st",  "jr",  "sr",    "vs",  "etc", "e.g", "i.e",
             "approx", "pt",  "pts",  "hx",    "dx",   "rx",  "tx",  "sx",    "fx",  "y.o", "b.i.d", "t.i.d",
             "q.i.d", "q.d",  "p.o",  "p.r.n", "a.m",  "p.m", "inc", "dept",  "fig", "jan", "feb", "apr",
             "jun",   "jul",  "aug",  "sep",   "sept", "oct", "nov", "ave",   "blvd", "u.s", "cf"} {}

Abbreviations Abbreviations::parse(std::string_view text) {
  std::set<std::string> words;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (t.back() == '.') t.remove_suffix(1);
    words.insert(lower(t));
  }
  return Abbreviations(std::move(words));
}

bool Abbreviations::contains(std::string_view word) const {
  while (!word.empty() && (word.front() == '(' || word.front() == '"' || word.front() == '\'')) word.remove_prefix(1);
  if (word.ends_with('.')) word.remove_suffix(1);
  if (word.empty()) return false;
  return words_.count(lower(word)) > 0;
}

std::vector<std::string> split_sentences(std::string_view text, const Abbreviations& abbrev) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (c != '.' && c != '!' && c != '?') continue;
    std::size_t end = i + 1;
    while (end < text.size() && (closing(text[end]) || text[end] == '.' || text[end] == '!' || text[end] == '?')) ++end;
    std::size_t j = end;
    if (j >= text.size() || !is_space(text[j])) continue;
    while (j < text.size() && is_space(text[j])) ++j;
    if (j >= text.size()) continue;
    bool capital = std::isupper(static_cast<unsigned char>(text[j])) || is_dummy_start(text.substr(j));
    if (!capital) continue;
    if (c == '.') {
      std::size_t w = i;
      while (w > start && !is_space(text[w - 1])) --w;
      std::string_view word = text.substr(w, i + 1 - w);
      if (abbrev.contains(word)) continue;
      // Single initials such as "J." or "R.N." chains.
      if (word.size() == 2 && std::isupper(static_cast<unsigned char>(word[0]))) continue;
    }
    auto sentence = trim(text.substr(start, end - start));
    if (!sentence.empty()) out.emplace_back(sentence);
    start = end;
    i = end - 1;
  }
  auto rest = trim(text.substr(start));
  if (!rest.empty()) out.emplace_back(rest);
  return out;
}

std::vector<std::string> tokenize(std::string_view sentence, const Abbreviations& abbrev) {
  static constexpr std::string_view kLeading = "([{\"'";
  static constexpr std::string_view kTrailing = ".,;:!?)]}\"'";
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < sentence.size()) {
    while (i < sentence.size() && is_space(sentence[i])) ++i;
    std::size_t j = i;
    while (j < sentence.size() && !is_space(sentence[j])) ++j;
    std::string_view word = sentence.substr(i, j - i);
    i = j;
    if (word.empty()) continue;

    std::vector<std::string> trailing;
    while (!word.empty()) {
      if (is_dummy_start(word)) {
        std::size_t close = word.find("**]");
        if (close != std::string_view::npos) {
          out.emplace_back(word.substr(0, close + 3));
          word.remove_prefix(close + 3);
          continue;
        }
      }
      if (kLeading.find(word.front()) != std::string_view::npos && word.size() > 1) {
        out.emplace_back(1, word.front());
        word.remove_prefix(1);
        continue;
      }
      break;
    }
    while (word.size() > 1 && kTrailing.find(word.back()) != std::string_view::npos) {
      if (word.back() == '.' && abbrev.contains(word)) break;
      if (word.ends_with("**]")) break;
      trailing.emplace_back(1, word.back());
      word.remove_suffix(1);
    }
    if (!word.empty()) out.emplace_back(word);
    out.insert(out.end(), trailing.rbegin(), trailing.rend());
  }
  return out;
}

}  // namespace clinlm::corpus

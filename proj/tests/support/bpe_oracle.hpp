// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

// Straightforward BPE trainer used only to cross-check the incremental one.
// Recounts every pair from scratch before each merge.

#pragma once

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clinlm/tokenizer/bpe.hpp"

namespace clinlm::testing {

inline std::vector<std::pair<std::string, std::string>> naive_bpe_merges(const std::vector<std::string>& lines,
                                                                          std::size_t n_merges) {
  std::map<std::string, long> counts;
  auto specials = bpe::default_specials();
  std::set<std::string> special_set(specials.begin(), specials.end());
  for (const auto& line : lines) {
    std::istringstream in(line);
    std::string w;
    while (in >> w)
      if (!special_set.count(w)) ++counts[w];
  }
  std::vector<std::pair<std::vector<std::string>, long>> words;
  std::set<std::string> known;
  for (const auto& [w, c] : counts) {
    std::vector<std::string> syms;
    for (auto ch : bpe::utf8_chars(w)) syms.emplace_back(ch);
    syms.back() += "</w>";
    for (const auto& s : bpe::utf8_chars(w)) {
      known.emplace(s);
      known.emplace(std::string(s) + "</w>");
    }
    words.emplace_back(std::move(syms), c);
  }
  std::vector<std::pair<std::string, std::string>> merges;
  while (merges.size() < n_merges) {
    std::map<std::pair<std::string, std::string>, long> pairs;
    for (const auto& [syms, c] : words)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pairs[{syms[i], syms[i + 1]}] += c;
    const std::pair<std::string, std::string>* best = nullptr;
    long best_count = 0;
    for (const auto& [p, c] : pairs) {  // map order is lexicographic, so strict > keeps the smallest on ties
      if (known.count(p.first + p.second)) continue;
      if (c > best_count) {
        best = &p;
        best_count = c;
      }
    }
    if (!best) break;
    auto chosen = *best;
    merges.push_back(chosen);
    known.insert(chosen.first + chosen.second);
    for (auto& [syms, c] : words) {
      std::vector<std::string> out;
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == chosen.first && syms[i + 1] == chosen.second) {
          out.push_back(chosen.first + chosen.second);
          i += 2;
        } else {
          out.push_back(syms[i++]);
        }
      }
      syms = std::move(out);
    }
  }
  return merges;
}

}  // namespace clinlm::testing

// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "clinlm/common/error.hpp"

namespace clinlm::metrics {

// Half-open [start, end) with a category; units are up to the caller.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string category;
  auto operator<=>(const Span&) const = default;
};

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t true_positives = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
};

// Empty prediction set: precision is 1 when gold is also empty, else 0.
// Recall is symmetric. F1 is 0 when P + R = 0.
Prf prf_from_counts(std::size_t tp, std::size_t predicted, std::size_t gold);

struct SpanPrf {
  Prf overall;
  std::map<std::string, Prf> per_category;
};

// Strict matching: start, end and category must all agree. Inputs are treated
// as sets, so duplicates count once.
SpanPrf span_prf(std::span<const Span> gold, std::span<const Span> pred);

// Sample Pearson correlation. Throws ValueError on length mismatch or fewer
// than two points and NumericError when either side has zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

template <typename L>
double accuracy(std::span<const L> gold, std::span<const L> pred) {
  if (gold.size() != pred.size())
    throw ValueError("accuracy: " + std::to_string(gold.size()) + " gold labels vs " + std::to_string(pred.size()) +
                     " predictions");
  if (gold.empty()) throw ValueError("accuracy: no examples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += gold[i] == pred[i];
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

template <typename L>
double accuracy(const std::vector<L>& gold, const std::vector<L>& pred) {
  return accuracy(std::span<const L>(gold), std::span<const L>(pred));
}

// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
// whitespace.
std::string normalize_answer(std::string_view s);

struct QaScore {
  double exact_match = 0.0;
  double f1 = 0.0;
};

// Best score over the gold answers. Throws ValueError when `golds` is empty.
QaScore qa_em_f1(std::span<const std::string> golds, std::string_view pred);

// {"task", "metrics": {name: value}, "per_category": {cat: {...}}}
nlohmann::json report(std::string_view task, const std::map<std::string, double>& values,
                      const std::map<std::string, Prf>& per_category = {});

}  // namespace clinlm::metrics

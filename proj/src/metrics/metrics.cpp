// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/metrics/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

namespace clinlm::metrics {

Prf prf_from_counts(std::size_t tp, std::size_t predicted, std::size_t gold) {
  Prf r;
  r.true_positives = tp;
  r.predicted = predicted;
  r.gold = gold;
  r.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : (gold ? 0.0 : 1.0);
  r.recall = gold ? static_cast<double>(tp) / static_cast<double>(gold) : (predicted ? 0.0 : 1.0);
  double s = r.precision + r.recall;
  r.f1 = s > 0.0 ? 2.0 * r.precision * r.recall / s : 0.0;
  return r;
}

SpanPrf span_prf(std::span<const Span> gold, std::span<const Span> pred) {
  std::set<Span> g(gold.begin(), gold.end()), p(pred.begin(), pred.end());
  struct Counts {
    std::size_t tp = 0, pred = 0, gold = 0;
  };
  std::map<std::string, Counts> by_cat;
  std::size_t tp = 0;
  for (const auto& s : g) ++by_cat[s.category].gold;
  for (const auto& s : p) {
    auto& c = by_cat[s.category];
    ++c.pred;
    if (g.count(s)) {
      ++c.tp;
      ++tp;
    }
  }
  SpanPrf out;
  out.overall = prf_from_counts(tp, p.size(), g.size());
  for (const auto& [cat, c] : by_cat) out.per_category[cat] = prf_from_counts(c.tp, c.pred, c.gold);
  return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw ValueError("pearson: lengths differ (" + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
  if (x.size() < 2) throw ValueError("pearson: need at least 2 points");
  double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("pearson: undefined for zero variance");
  double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

namespace {

std::vector<std::string> answer_tokens(std::string_view s) {
  std::istringstream in(normalize_answer(s));
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

bool ascii_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }

}  // namespace

std::string normalize_answer(std::string_view s) {
  std::string lowered;
  for (unsigned char c : s) {
    if (ascii_punct(c)) continue;
    lowered += c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
  }
  std::istringstream in(lowered);
  std::string w, out;
  while (in >> w) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

QaScore qa_em_f1(std::span<const std::string> golds, std::string_view pred) {
  if (golds.empty()) throw ValueError("qa_em_f1: gold answer set is empty");
  auto p = answer_tokens(pred);
  std::string pn = normalize_answer(pred);
  QaScore best;
  for (const auto& gold : golds) {
    if (normalize_answer(gold) == pn) best.exact_match = 1.0;
    auto g = answer_tokens(gold);
    double f1 = 0.0;
    if (g.empty() || p.empty()) {
      f1 = g.empty() && p.empty() ? 1.0 : 0.0;
    } else {
      std::map<std::string, long> bag;
      for (const auto& t : g) ++bag[t];
      std::size_t common = 0;
      for (const auto& t : p)
        if (auto it = bag.find(t); it != bag.end() && it->second > 0) {
          --it->second;
          ++common;
        }
      if (common) {
        double prec = static_cast<double>(common) / static_cast<double>(p.size());
        double rec = static_cast<double>(common) / static_cast<double>(g.size());
        f1 = 2 * prec * rec / (prec + rec);
      }
    }
    best.f1 = std::max(best.f1, f1);
  }
  return best;
}

nlohmann::json report(std::string_view task, const std::map<std::string, double>& values,
                      const std::map<std::string, Prf>& per_category) {
  nlohmann::json j;
  j["task"] = task;
  j["metrics"] = nlohmann::json::object();
  for (const auto& [k, v] : values) j["metrics"][k] = v;
  j["per_category"] = nlohmann::json::object();
  for (const auto& [cat, p] : per_category)
    j["per_category"][cat] = {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1},
                              {"true_positives", p.true_positives}, {"predicted", p.predicted}, {"gold", p.gold}};
  return j;
}

}  // namespace clinlm::metrics

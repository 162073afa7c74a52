// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/tasks/structure.hpp"

#include <algorithm>

#include "clinlm/common/error.hpp"

namespace clinlm::tasks {

std::vector<std::string> bio_label_set(std::vector<std::string> categories) {
  std::sort(categories.begin(), categories.end());
  categories.erase(std::unique(categories.begin(), categories.end()), categories.end());
  std::vector<std::string> out{"O"};
  for (const auto& c : categories) {
    out.push_back("B-" + c);
    out.push_back("I-" + c);
  }
  return out;
}

std::vector<std::string> bio_encode(std::size_t n_tokens, std::span<const metrics::Span> spans) {
  std::vector<std::string> tags(n_tokens, "O");
  std::vector<const metrics::Span*> owner(n_tokens, nullptr);
  for (const auto& s : spans) {
    if (s.start >= s.end || s.end > n_tokens) {
      throw ValueError("span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                       ") is empty or exceeds " + std::to_string(n_tokens) + " tokens");
    }
    for (std::size_t i = s.start; i < s.end; ++i) {
      if (owner[i] != nullptr) {
        throw ValueError("spans " + owner[i]->category + " and " + s.category + " overlap at token " +
                         std::to_string(i) + "; use per-category mode");
      }
      owner[i] = &s;
      tags[i] = (i == s.start ? "B-" : "I-") + s.category;
    }
  }
  return tags;
}

namespace {

struct Tag {
  char kind;  // 'O', 'B', 'I'
  std::string category;
};

Tag parse_tag(const std::string& label) {
  if (label == "O") return {'O', {}};
  if (label.size() > 2 && (label[0] == 'B' || label[0] == 'I') && label[1] == '-') {
    return {label[0], label.substr(2)};
  }
  throw SchemaError("invalid BIO label '" + label + "'");
}

}  // namespace

std::vector<metrics::Span> bio_decode(std::span<const std::string> labels) {
  std::vector<metrics::Span> out;
  bool open = false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Tag t = parse_tag(labels[i]);
    bool continues = t.kind == 'I' && open && out.back().category == t.category;
    if (continues) {
      out.back().end = i + 1;
      continue;
    }
    open = false;
    if (t.kind == 'O') continue;
    out.push_back({i, i + 1, t.category});
    open = true;
  }
  return out;
}

bool is_well_formed_bio(std::span<const std::string> labels) {
  std::string prev;  // category of the previous B/I tag, empty after O
  for (const auto& l : labels) {
    Tag t = parse_tag(l);
    if (t.kind == 'I' && prev != t.category) return false;
    prev = t.kind == 'O' ? std::string() : t.category;
  }
  return true;
}

bool CandidateRules::admits(const std::string& a, const std::string& b) const {
  return allowed.count({a, b}) > 0 || allowed.count({b, a}) > 0;
}

CandidateRules default_candidate_rules() {
  CandidateRules r;
  for (const char* attr : {"Strength", "Dosage", "Duration", "Frequency", "Form", "Route", "Reason", "ADE"}) {
    r.allowed.insert({"Drug", attr});
  }
  return r;
}

std::vector<std::pair<std::size_t, std::size_t>> generate_candidates(std::span<const Concept> concepts,
                                                                     const CandidateRules& rules) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    for (std::size_t j = i + 1; j < concepts.size(); ++j) {
      const auto& a = concepts[i];
      const auto& b = concepts[j];
      std::size_t gap = a.sentence > b.sentence ? a.sentence - b.sentence : b.sentence - a.sentence;
      if (gap <= rules.max_sentence_gap && rules.admits(a.type, b.type)) out.emplace_back(i, j);
    }
  }
  return out;
}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string mark(std::string_view s, std::pair<std::size_t, std::size_t> span, const char* open,
                 const char* close) {
  auto [start, end] = span;
  if (start >= end || end > s.size()) {
    throw ValueError("entity span [" + std::to_string(start) + ", " + std::to_string(end) +
                     ") is empty or outside a sentence of " + std::to_string(s.size()) + " bytes");
  }
  while (start > 0 && !is_space(s[start - 1])) --start;
  while (end < s.size() && !is_space(s[end])) ++end;
  std::string out;
  out.reserve(s.size() + 12);
  // After widening, s[start - 1] and s[end] (when present) are whitespace.
  out.append(s.substr(0, start));
  out.append(open);
  out.push_back(' ');
  out.append(s.substr(start, end - start));
  out.push_back(' ');
  out.append(close);
  out.append(s.substr(end));
  return out;
}

}  // namespace

MarkedPair mark_entities(std::string_view s1, std::pair<std::size_t, std::size_t> c1, std::string_view s2,
                         std::pair<std::size_t, std::size_t> c2) {
  return {mark(s1, c1, kS1, kE1), mark(s2, c2, kS2, kE2)};
}

WindowPlan plan_windows(const QaWindowing& w, std::size_t question_len, std::size_t max_seq_len) {
  if (w.window == 0 || w.stride == 0 || w.stride > w.window) {
    throw ConfigError("QA windowing needs 0 < stride <= window (got window " + std::to_string(w.window) +
                      ", stride " + std::to_string(w.stride) + ")");
  }
  WindowPlan p;
  p.question = std::min(question_len, w.max_question);
  if (max_seq_len < p.question + 4) {
    throw ConfigError("max_seq_len " + std::to_string(max_seq_len) + " leaves no room for context after a " +
                      std::to_string(p.question) + "-token question");
  }
  std::size_t room = max_seq_len - p.question - 3;
  p.window = std::min(w.window, room);
  std::size_t cut = w.window - p.window;
  p.stride = w.stride > cut ? w.stride - cut : 1;
  return p;
}

std::vector<std::size_t> window_starts(std::size_t context_len, std::size_t window, std::size_t stride) {
  std::vector<std::size_t> starts{0};
  while (starts.back() + window < context_len) starts.push_back(starts.back() + stride);
  return starts;
}

std::vector<QaWindow> qa_windows(std::span<const std::int32_t> question, std::span<const std::int32_t> context,
                                 const QaWindowing& w, std::size_t max_seq_len, std::int32_t cls_id,
                                 std::int32_t sep_id) {
  WindowPlan plan = plan_windows(w, question.size(), max_seq_len);
  std::vector<QaWindow> out;
  for (std::size_t start : window_starts(context.size(), plan.window, plan.stride)) {
    QaWindow win;
    win.start = start;
    win.length = std::min(plan.window, context.size() - std::min(start, context.size()));
    win.ids.push_back(cls_id);
    win.ids.insert(win.ids.end(), question.begin(), question.begin() + static_cast<std::ptrdiff_t>(plan.question));
    win.ids.push_back(sep_id);
    win.segments.assign(win.ids.size(), 0);
    win.context_offset = win.ids.size();
    auto first = context.begin() + static_cast<std::ptrdiff_t>(start);
    win.ids.insert(win.ids.end(), first, first + static_cast<std::ptrdiff_t>(win.length));
    win.ids.push_back(sep_id);
    win.segments.resize(win.ids.size(), 1);
    out.push_back(std::move(win));
  }
  return out;
}

SpanChoice best_span(std::span<const float> start_logits, std::span<const float> end_logits, std::size_t begin,
                     std::size_t length, std::size_t max_answer) {
  SpanChoice best;
  std::size_t stop = std::min({begin + length, start_logits.size(), end_logits.size()});
  for (std::size_t i = begin; i < stop; ++i) {
    std::size_t last = std::min(stop, i + max_answer);
    for (std::size_t j = i; j < last; ++j) {
      double s = static_cast<double>(start_logits[i]) + end_logits[j];
      if (!best.found || s > best.score) best = {true, i, j, s};
    }
  }
  return best;
}

}  // namespace clinlm::tasks

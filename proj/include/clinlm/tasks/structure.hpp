// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

// Pure preprocessing for the task heads: BIO tagging, relation candidates
// and entity markers, QA windowing and span selection.
#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clinlm/metrics/metrics.hpp"

namespace clinlm::tasks {

// --- BIO -------------------------------------------------------------------

// "O" followed by B-/I- for each category in sorted order.
std::vector<std::string> bio_label_set(std::vector<std::string> categories);

// Token-index spans [start, end). Overlapping spans cannot share one tag
// sequence; ValueError points at per-category mode.
std::vector<std::string> bio_encode(std::size_t n_tokens, std::span<const metrics::Span> spans);

// A dangling I-x (after O or another category) opens a new span, as if it
// were B-x. SchemaError on labels that are not O, B-x or I-x.
std::vector<metrics::Span> bio_decode(std::span<const std::string> labels);

// Well-formed gold: no I-x unless the previous tag is B-x or I-x.
bool is_well_formed_bio(std::span<const std::string> labels);

// --- relation extraction -----------------------------------------------------

struct Concept {
  std::size_t sentence = 0;
  std::size_t start = 0;  // byte offsets within the sentence
  std::size_t end = 0;
  std::string type;
};

struct CandidateRules {
  // Unordered type pairs; {"Drug","ADE"} also admits ADE + Drug.
  std::set<std::pair<std::string, std::string>> allowed;
  std::size_t max_sentence_gap = 1;

  bool admits(const std::string& a, const std::string& b) const;
};

// Drug paired with each medication attribute (Strength, Dosage, Duration,
// Frequency, Form, Route, Reason, ADE).
CandidateRules default_candidate_rules();

// Index pairs (i < j) in lexicographic order.
std::vector<std::pair<std::size_t, std::size_t>> generate_candidates(std::span<const Concept> concepts,
                                                                     const CandidateRules& rules);

inline constexpr const char* kS1 = "[S1]";
inline constexpr const char* kE1 = "[E1]";
inline constexpr const char* kS2 = "[S2]";
inline constexpr const char* kE2 = "[E2]";

struct MarkedPair {
  std::string s1, s2;
};

// Wraps c1 in [S1]..[E1] within s1 and c2 in [S2]..[E2] within s2, as
// separate whitespace-delimited words. Offsets that fall inside a word are
// widened to the word boundaries. ValueError on empty or out-of-range spans.
MarkedPair mark_entities(std::string_view s1, std::pair<std::size_t, std::size_t> c1, std::string_view s2,
                         std::pair<std::size_t, std::size_t> c2);

// --- QA windowing ------------------------------------------------------------

struct QaWindowing {
  std::size_t max_question = 64;
  std::size_t window = 446;
  std::size_t stride = 396;
  std::size_t max_answer = 32;
};

struct WindowPlan {
  std::size_t question = 0;  // question tokens kept
  std::size_t window = 0;
  std::size_t stride = 0;
};

// Budget rule: [CLS] q [SEP] window [SEP] must fit max_seq_len. The
// question is cut to max_question first; if the window still does not fit
// it shrinks to the remaining room and the stride shrinks by the same
// amount, so the overlap (window - stride) is preserved while possible.
WindowPlan plan_windows(const QaWindowing& w, std::size_t question_len, std::size_t max_seq_len);

// Starts 0, stride, 2*stride, ... up to the first window reaching the end.
std::vector<std::size_t> window_starts(std::size_t context_len, std::size_t window, std::size_t stride);

struct QaWindow {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segments;
  std::size_t context_offset = 0;  // packed index of the first context token
  std::size_t start = 0;           // first context token index covered
  std::size_t length = 0;          // context tokens in this window
};

std::vector<QaWindow> qa_windows(std::span<const std::int32_t> question, std::span<const std::int32_t> context,
                                 const QaWindowing& w, std::size_t max_seq_len, std::int32_t cls_id,
                                 std::int32_t sep_id);

struct SpanChoice {
  bool found = false;
  std::size_t start = 0;  // inclusive positions in the scored sequence
  std::size_t end = 0;
  double score = 0.0;
};

// Maximizes start[i] + end[j] over begin <= i <= j < begin + length with
// j - i < max_answer. Ties keep the earliest (i, j).
SpanChoice best_span(std::span<const float> start_logits, std::span<const float> end_logits, std::size_t begin,
                     std::size_t length, std::size_t max_answer);

}  // namespace clinlm::tasks

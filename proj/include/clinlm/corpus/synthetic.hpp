// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "clinlm/corpus/corpus.hpp"

namespace clinlm::corpus {

struct SyntheticPhiDoc {
  RawDocument doc;
  std::vector<PhiSpan> gold;  // byte offsets into doc.text
};

// Template notes with injected identifiers at known offsets. Categories are
// cycled so every one of the 18 receives about 3 * n_docs / 18 spans. Text
// is plain ASCII, so normalization leaves offsets unchanged.
std::vector<SyntheticPhiDoc> synthetic_phi_corpus(std::size_t n_docs, std::uint64_t seed);

struct CategoryRecall {
  std::size_t gold = 0;
  std::size_t found = 0;
  double recall() const { return gold ? static_cast<double>(found) / static_cast<double>(gold) : 1.0; }
};

// A gold span counts as found when a predicted span of the same category
// contains it.
std::map<std::string, CategoryRecall> phi_recall(std::span<const PhiSpan> gold, std::span<const PhiSpan> pred);

}  // namespace clinlm::corpus

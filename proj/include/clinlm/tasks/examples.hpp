// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

// Task datasets and their JSONL forms:
//   ner  {"tokens":[...], "labels":[...]}
//   re   {"s1", "s2", "c1":[start,end], "c2":[start,end], "label"}
//   sts  {"a", "b", "score"}
//   nli  {"premise", "hypothesis", "label"}
//   qa   {"question", "context", "answers":[{"start", "text"}]}
// Character offsets are byte offsets into the UTF-8 strings; ends are
// exclusive.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace clinlm::tasks {

struct NerExample {
  std::vector<std::string> tokens;
  std::vector<std::string> labels;
};

struct ReExample {
  std::string s1, s2;
  std::pair<std::size_t, std::size_t> c1, c2;
  std::string label;
};

struct StsExample {
  std::string a, b;
  double score = 0.0;
};

struct NliExample {
  std::string premise, hypothesis, label;
};

struct QaAnswer {
  std::size_t start = 0;
  std::string text;
};

struct QaExample {
  std::string question, context;
  std::vector<QaAnswer> answers;
};

inline constexpr double kStsMin = 0.0;
inline constexpr double kStsMax = 5.0;
inline constexpr const char* kNoRelation = "no-relation";
const std::vector<std::string>& nli_labels();

// Parsers validate the schema and the per-type invariants, raising
// SchemaError with the 1-based line number.
std::vector<NerExample> read_ner(const std::filesystem::path& path);
std::vector<ReExample> read_re(const std::filesystem::path& path);
std::vector<StsExample> read_sts(const std::filesystem::path& path);
std::vector<NliExample> read_nli(const std::filesystem::path& path);
std::vector<QaExample> read_qa(const std::filesystem::path& path);

NerExample ner_from_json(const nlohmann::json& j);
ReExample re_from_json(const nlohmann::json& j);
StsExample sts_from_json(const nlohmann::json& j);
NliExample nli_from_json(const nlohmann::json& j);
QaExample qa_from_json(const nlohmann::json& j);

nlohmann::json to_json(const NerExample& e);
nlohmann::json to_json(const ReExample& e);
nlohmann::json to_json(const StsExample& e);
nlohmann::json to_json(const NliExample& e);
nlohmann::json to_json(const QaExample& e);

// Small synthetic sets for smoke tests and overfitting checks.
std::vector<NerExample> synthetic_ner(std::size_t n, std::uint64_t seed);
std::vector<ReExample> synthetic_re(std::size_t n, std::uint64_t seed);
std::vector<StsExample> synthetic_sts(std::size_t n, std::uint64_t seed);
std::vector<NliExample> synthetic_nli(std::size_t n, std::uint64_t seed);
std::vector<QaExample> synthetic_qa(std::size_t n, std::uint64_t seed);

}  // namespace clinlm::tasks

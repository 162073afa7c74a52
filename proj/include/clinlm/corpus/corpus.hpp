// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "clinlm/corpus/deid.hpp"
#include "clinlm/corpus/text.hpp"

namespace clinlm::corpus {

struct RawDocument {
  std::string id;
  std::string text;
  std::string source_tag;
};

struct CleanDocument {
  std::string id;
  std::vector<std::vector<std::string>> sentences;
};

// Keeps the first document for each distinct normalized text and drops
// documents that normalize to whitespace only. Order is preserved.
std::vector<RawDocument> dedup_corpus(const std::vector<RawDocument>& docs);

struct CleanResult {
  CleanDocument doc;
  std::vector<PhiSpan> spans;  // offsets into the normalized text
};

// normalize -> deidentify -> split sentences -> tokenize.
CleanResult clean_document(const RawDocument& raw, const RuleSet& rules, const Abbreviations& abbrev = Abbreviations());

struct PipelineOutput {
  std::vector<CleanDocument> docs;  // sorted by id
  DeidReport report;
};

PipelineOutput run_pipeline(const std::vector<RawDocument>& raw, const RuleSet& rules,
                            const Abbreviations& abbrev = Abbreviations());

// {"id", "text", "source_tag"} per line; source_tag may be absent. Duplicate
// ids and missing fields raise SchemaError.
std::vector<RawDocument> read_raw_jsonl(const std::filesystem::path& path);
std::vector<CleanDocument> read_clean_jsonl(const std::filesystem::path& path);

nlohmann::json to_json(const RawDocument& d);
nlohmann::json to_json(const CleanDocument& d);

// Tokens joined by single spaces, sentences by single spaces.
std::string detokenize(const CleanDocument& d);

}  // namespace clinlm::corpus

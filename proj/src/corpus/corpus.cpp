// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/corpus/corpus.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>

#include "clinlm/common/error.hpp"
#include "clinlm/common/io.hpp"

namespace clinlm::corpus {
namespace {

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; });
}

std::string field(const nlohmann::json& j, const char* name, std::size_t line, bool required = true) {
  auto it = j.find(name);
  if (it == j.end()) {
    if (!required) return {};
    throw SchemaError("line " + std::to_string(line) + ": missing field \"" + name + "\"");
  }
  if (!it->is_string()) throw SchemaError("line " + std::to_string(line) + ": field \"" + name + "\" must be a string");
  return it->get<std::string>();
}

}  // namespace

std::vector<RawDocument> dedup_corpus(const std::vector<RawDocument>& docs) {
  std::unordered_set<std::string> seen;
  std::vector<RawDocument> out;
  for (const auto& d : docs) {
    std::string norm = normalize_text(d.text);
    if (blank(norm)) continue;
    if (!seen.insert(std::move(norm)).second) continue;
    out.push_back(d);
  }
  return out;
}

CleanResult clean_document(const RawDocument& raw, const RuleSet& rules, const Abbreviations& abbrev) {
  CleanResult r;
  r.doc.id = raw.id;
  auto deid = deidentify(normalize_text(raw.text), rules);
  r.spans = std::move(deid.spans);
  for (const auto& s : split_sentences(deid.text, abbrev)) {
    auto toks = tokenize(s, abbrev);
    if (!toks.empty()) r.doc.sentences.push_back(std::move(toks));
  }
  return r;
}

PipelineOutput run_pipeline(const std::vector<RawDocument>& raw, const RuleSet& rules, const Abbreviations& abbrev) {
  PipelineOutput out;
  for (const auto& d : dedup_corpus(raw)) {
    auto r = clean_document(d, rules, abbrev);
    out.report.add(r.spans);
    if (!r.doc.sentences.empty()) out.docs.push_back(std::move(r.doc));
  }
  std::stable_sort(out.docs.begin(), out.docs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

std::vector<RawDocument> read_raw_jsonl(const std::filesystem::path& path) {
  std::vector<RawDocument> docs;
  std::set<std::string> ids;
  for_each_jsonl(path, [&](std::size_t line, const nlohmann::json& j) {
    RawDocument d{field(j, "id", line), field(j, "text", line), field(j, "source_tag", line, false)};
    if (!ids.insert(d.id).second) throw SchemaError("line " + std::to_string(line) + ": duplicate id " + d.id);
    docs.push_back(std::move(d));
  });
  return docs;
}

std::vector<CleanDocument> read_clean_jsonl(const std::filesystem::path& path) {
  std::vector<CleanDocument> docs;
  for_each_jsonl(path, [&](std::size_t line, const nlohmann::json& j) {
    CleanDocument d{field(j, "id", line), {}};
    auto it = j.find("sentences");
    if (it == j.end() || !it->is_array()) throw SchemaError("line " + std::to_string(line) + ": missing \"sentences\" array");
    try {
      d.sentences = it->get<std::vector<std::vector<std::string>>>();
    } catch (const nlohmann::json::exception&) {
      throw SchemaError("line " + std::to_string(line) + ": \"sentences\" must be a list of token lists");
    }
    docs.push_back(std::move(d));
  });
  return docs;
}

nlohmann::json to_json(const RawDocument& d) { return {{"id", d.id}, {"text", d.text}, {"source_tag", d.source_tag}}; }

nlohmann::json to_json(const CleanDocument& d) { return {{"id", d.id}, {"sentences", d.sentences}}; }

std::string detokenize(const CleanDocument& d) {
  std::string out;
  for (const auto& s : d.sentences)
    for (const auto& t : s) {
      if (!out.empty()) out += ' ';
      out += t;
    }
  return out;
}

}  // namespace clinlm::corpus

// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace clinlm::corpus {

// The 18 safe-harbor identifier categories.
const std::vector<std::string>& phi_categories();
bool is_phi_category(std::string_view name);

// Byte offsets into the text passed to deidentify().
struct PhiSpan {
  std::string category;
  std::size_t start = 0;
  std::size_t end = 0;
  std::string surface;
};

// Ordered "CATEGORY<TAB>regex" rules (ECMAScript syntax). When a pattern has
// capture groups, the first group that participates is the PHI span and the
// rest of the match is context.
class RuleSet {
 public:
  struct Rule {
    std::string category;
    std::string pattern;
    std::regex regex;
  };

  // Blank lines and lines starting with '#' are skipped. Unknown categories
  // and malformed patterns raise ConfigError naming the line.
  static RuleSet parse(std::string_view text);
  static RuleSet load(const std::filesystem::path& path);
  static RuleSet builtin();

  const std::vector<Rule>& rules() const { return rules_; }

 private:
  std::vector<Rule> rules_;
};

// Source text of the builtin rule file, covering all 18 categories.
std::string builtin_rules_text();

// Common given names used by the NAME gazetteer rule.
std::span<const std::string_view> gazetteer_first_names();

struct DeidResult {
  std::string text;
  std::vector<PhiSpan> spans;  // in reading order, non-overlapping
};

// Candidates from all rules are resolved longest first, then leftmost, then
// by rule order. Matches overlapping an existing "[**...**]" token are
// ignored, so the output is a fixed point.
DeidResult deidentify(std::string_view text, const RuleSet& rules);

std::string dummy_token(std::string_view category);

struct DeidReport {
  std::map<std::string, std::size_t> counts;
  std::size_t documents = 0;

  DeidReport();
  void add(std::span<const PhiSpan> spans);
  std::size_t total() const;
  nlohmann::json to_json() const;
};

}  // namespace clinlm::corpus

// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/corpus/deid.hpp"

#include <algorithm>
#include <array>
#include <sstream>

#include "clinlm/common/error.hpp"
#include "clinlm/common/io.hpp"

namespace clinlm::corpus {
namespace {

constexpr std::array<std::string_view, 64> kFirstNames = {
    "James",   "Mary",    "Robert",  "Patricia", "John",    "Jennifer", "Michael", "Linda",
    "David",   "Elizabeth", "William", "Barbara", "Richard", "Susan",   "Joseph",  "Jessica",
    "Thomas",  "Sarah",   "Charles", "Karen",    "Daniel",  "Lisa",     "Matthew", "Nancy",
    "Anthony", "Betty",   "Mark",    "Margaret", "Donald",  "Sandra",   "Steven",  "Ashley",
    "Paul",    "Kimberly", "Andrew", "Emily",    "Joshua",  "Donna",    "Kenneth", "Michelle",
    "Kevin",   "Carol",   "Brian",   "Amanda",   "George",  "Melissa",  "Edward",  "Deborah",
    "Ronald",  "Stephanie", "Timothy", "Rebecca", "Jason",  "Laura",    "Jeffrey", "Sharon",
    "Ryan",    "Cynthia", "Jacob",   "Kathleen", "Gary",    "Amy",      "Nicholas", "Angela"};

constexpr std::string_view kRuleTemplate = R"(# category<TAB>ECMAScript regex; group 1, when present, is the span
NAME	\b(?:Dr|Mr|Mrs|Ms|Prof)\.? ([A-Z][a-z]+(?:-[A-Z][a-z]+)?(?: [A-Z][a-z]+)?)\b
NAME	\b(?:@FIRST@)(?: [A-Z]\.)?(?: [A-Z][a-z]+(?:-[A-Z][a-z]+)?)?\b
ADDRESS	\b\d{1,5} (?:[A-Z][a-z]+ ){1,3}(?:Street|St|Avenue|Ave|Road|Rd|Boulevard|Blvd|Lane|Ln|Drive|Court|Ct|Way|Place|Pl)\b(?:,? [A-Z][a-z]+(?: [A-Z][a-z]+)?,? [A-Z]{2}(?: \d{5}(?:-\d{4})?)?)?
ADDRESS	\b(?:[Zz]ip(?: code)?|ZIP)[: ]\s*(\d{5}(?:-\d{4})?)\b
DATE	\b(?:\d{1,2}/\d{1,2}/(?:\d{4}|\d{2})|\d{4}-\d{2}-\d{2})\b
DATE	\b(?:January|February|March|April|May|June|July|August|September|October|November|December|Jan|Feb|Mar|Apr|Jun|Jul|Aug|Sep|Sept|Oct|Nov|Dec)\.? \d{1,2}(?:st|nd|rd|th)?,? \d{4}\b
DATE	\b(?:9\d|1[01]\d)[- ](?:year|yr)s?[- ]old\b
FAX	\b(?:[Ff]ax|FAX)(?: number| no\.?)?:? ((?:\(\d{3}\) ?|\d{3}[-.])\d{3}[-.]\d{4})\b
PHONE	(?:\(\d{3}\) ?|\b\d{3}[-.])\d{3}[-.]\d{4}\b
EMAIL	\b[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}\b
SSN	\b\d{3}-\d{2}-\d{4}\b
MRN	\b(?:MRN|[Mm]edical record(?: number)?|MR#)[:#]?\s*([A-Z]?\d{6,10})\b
HEALTH_PLAN	\b(?:[Mm]ember ID|[Pp]olicy(?: number| no\.?)?|[Hh]ealth plan(?: number| ID)?|[Ii]nsurance ID)[:#]?\s*([A-Z]{2,3}\d{6,12})\b
ACCOUNT	\b(?:[Aa]ccount|[Aa]cct)(?: number| no\.?| #)?[:#]?\s*(\d{6,14})\b
LICENSE	\b(?:[Ll]icense|[Ll]ic\.?|DEA)(?: number| no\.?| #)?[:#]?\s*([A-Z]{1,2}\d{5,10})\b
VEHICLE	\bVIN[:#]?\s*([A-HJ-NPR-Z0-9]{17})\b
VEHICLE	\b[Ll]icense plate[:#]?\s*([A-Z0-9]{2,3}-?[A-Z0-9]{3,4})\b
DEVICE	\b(?:[Ss]erial(?: number| no\.?)?|[Dd]evice ID|[Ii]mplant ID)[:#]?\s*([A-Z]{1,4}-?\d{4,10})\b
URL	\bhttps?://[^\s]*[^\s.,;:!?)]
URL	\bwww\.[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[a-z]{2,}(?:/[^\s]*[^\s.,;:!?)])?
IP	\b(?:(?:25[0-5]|2[0-4]\d|1?\d?\d)\.){3}(?:25[0-5]|2[0-4]\d|1?\d?\d)\b
BIOMETRIC	\b(?:[Ff]ingerprint|[Rr]etinal scan|[Vv]oiceprint|[Bb]iometric)(?: ID| id| identifier| record)?[:#]?\s*([A-Z]{2,4}-?[0-9A-F]{6,16})\b
PHOTO	\b(?:[Pp]hoto|[Pp]hotograph|[Ii]mage)(?: file| ID)?[:#]?\s*([A-Za-z0-9_-]+\.(?:jpg|jpeg|png|gif|tiff|bmp))\b
OTHER_ID	\b(?:[Pp]atient ID|[Cc]ase(?: number| no\.?)|[Ss]tudy ID|[Ee]ncounter(?: number| ID))[:#]?\s*([A-Z0-9]{2,}-?[A-Z0-9]{3,})\b
)";

struct Candidate {
  std::size_t start, end, rule;
};

}  // namespace

const std::vector<std::string>& phi_categories() {
  static const std::vector<std::string> cats = {
      "NAME", "ADDRESS", "DATE",    "PHONE",   "FAX",    "EMAIL", "SSN",       "MRN",   "HEALTH_PLAN",
      "ACCOUNT", "LICENSE", "VEHICLE", "DEVICE", "URL", "IP",    "BIOMETRIC", "PHOTO", "OTHER_ID"};
  return cats;
}

bool is_phi_category(std::string_view name) {
  const auto& c = phi_categories();
  return std::find(c.begin(), c.end(), name) != c.end();
}

std::span<const std::string_view> gazetteer_first_names() { return kFirstNames; }

std::string builtin_rules_text() {
  std::string names;
  for (auto n : kFirstNames) {
    if (!names.empty()) names += '|';
    names += n;
  }
  std::string text(kRuleTemplate);
  text.replace(text.find("@FIRST@"), 7, names);
  return text;
}

RuleSet RuleSet::parse(std::string_view text) {
  RuleSet rs;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw ConfigError("rules line " + std::to_string(lineno) + ": expected CATEGORY<TAB>pattern");
    std::string cat = line.substr(0, tab), pat = line.substr(tab + 1);
    if (!is_phi_category(cat)) throw ConfigError("rules line " + std::to_string(lineno) + ": unknown category " + cat);
    if (pat.empty()) throw ConfigError("rules line " + std::to_string(lineno) + ": empty pattern");
    try {
      rs.rules_.push_back({cat, pat, std::regex(pat, std::regex::ECMAScript | std::regex::optimize)});
    } catch (const std::regex_error& e) {
      throw ConfigError("rules line " + std::to_string(lineno) + ": bad pattern: " + e.what());
    }
  }
  return rs;
}

RuleSet RuleSet::load(const std::filesystem::path& path) { return parse(read_file(path)); }

RuleSet RuleSet::builtin() {
  static const RuleSet rs = parse(builtin_rules_text());
  return rs;
}

std::string dummy_token(std::string_view category) { return "[**" + std::string(category) + "**]"; }

DeidResult deidentify(std::string_view text, const RuleSet& rules) {
  std::vector<std::pair<std::size_t, std::size_t>> dummies;
  for (std::size_t p = text.find("[**"); p != std::string_view::npos; p = text.find("[**", p + 1)) {
    std::size_t close = text.find("**]", p + 3);
    if (close == std::string_view::npos) break;
    dummies.emplace_back(p, close + 3);
  }
  auto hits_dummy = [&](std::size_t b, std::size_t e) {
    for (auto [db, de] : dummies)
      if (b < de && db < e) return true;
    return false;
  };

  std::vector<Candidate> cands;
  const char* base = text.data();
  const char* last = base + text.size();
  for (std::size_t r = 0; r < rules.rules().size(); ++r) {
    const auto& re = rules.rules()[r].regex;
    std::size_t pos = 0;
    std::cmatch m;
    while (pos <= text.size()) {
      auto flags = pos > 0 ? std::regex_constants::match_prev_avail : std::regex_constants::match_default;
      if (!std::regex_search(base + pos, last, m, re, flags)) break;
      std::size_t mb = pos + static_cast<std::size_t>(m.position(0));
      std::size_t me = mb + static_cast<std::size_t>(m.length(0));
      std::size_t sb = mb, se = me;
      for (std::size_t g = 1; g < m.size(); ++g)
        if (m[g].matched) {
          sb = pos + static_cast<std::size_t>(m.position(g));
          se = sb + static_cast<std::size_t>(m.length(g));
          break;
        }
      if (se > sb && !hits_dummy(mb, me)) {
        cands.push_back({sb, se, r});
        pos = std::max(me, mb + 1);
      } else {
        pos = mb + 1;
      }
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    std::size_t la = a.end - a.start, lb = b.end - b.start;
    if (la != lb) return la > lb;
    if (a.start != b.start) return a.start < b.start;
    return a.rule < b.rule;
  });
  std::vector<Candidate> chosen;
  for (const auto& c : cands) {
    bool clash = false;
    for (const auto& k : chosen) clash = clash || (c.start < k.end && k.start < c.end);
    if (!clash) chosen.push_back(c);
  }
  std::sort(chosen.begin(), chosen.end(), [](const Candidate& a, const Candidate& b) { return a.start < b.start; });

  DeidResult out;
  std::size_t cursor = 0;
  for (const auto& c : chosen) {
    const auto& cat = rules.rules()[c.rule].category;
    out.text.append(text.substr(cursor, c.start - cursor));
    out.text += dummy_token(cat);
    out.spans.push_back({cat, c.start, c.end, std::string(text.substr(c.start, c.end - c.start))});
    cursor = c.end;
  }
  out.text.append(text.substr(cursor));
  return out;
}

DeidReport::DeidReport() {
  for (const auto& c : phi_categories()) counts[c] = 0;
}

void DeidReport::add(std::span<const PhiSpan> spans) {
  ++documents;
  for (const auto& s : spans) ++counts[s.category];
}

std::size_t DeidReport::total() const {
  std::size_t t = 0;
  for (const auto& [c, n] : counts) t += n;
  return t;
}

nlohmann::json DeidReport::to_json() const {
  nlohmann::json j;
  j["documents"] = documents;
  j["total_spans"] = total();
  j["counts"] = nlohmann::json::object();
  for (const auto& [c, n] : counts) j["counts"][c] = n;
  return j;
}

}  // namespace clinlm::corpus

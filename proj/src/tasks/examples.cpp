// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/tasks/examples.hpp"

#include <algorithm>
#include <array>
#include <functional>

#include "clinlm/common/error.hpp"
#include "clinlm/common/io.hpp"
#include "clinlm/common/rng.hpp"
#include "clinlm/tasks/structure.hpp"

namespace clinlm::tasks {

using nlohmann::json;

const std::vector<std::string>& nli_labels() {
  static const std::vector<std::string> labels{"entailment", "contradiction", "neutral"};
  return labels;
}

namespace {

const json& field(const json& j, const char* name) {
  if (!j.is_object()) throw SchemaError("expected a JSON object");
  auto it = j.find(name);
  if (it == j.end()) throw SchemaError(std::string("missing field '") + name + "'");
  return *it;
}

std::string str(const json& j, const char* name) {
  const json& v = field(j, name);
  if (!v.is_string()) throw SchemaError(std::string("field '") + name + "' must be a string");
  return v.get<std::string>();
}

std::pair<std::size_t, std::size_t> offsets(const json& j, const char* name, std::size_t limit) {
  const json& v = field(j, name);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number_unsigned() || !v[1].is_number_unsigned()) {
    throw SchemaError(std::string("field '") + name + "' must be [start, end]");
  }
  std::pair<std::size_t, std::size_t> out{v[0].get<std::size_t>(), v[1].get<std::size_t>()};
  if (out.first >= out.second || out.second > limit) {
    throw SchemaError(std::string("field '") + name + "' is empty or exceeds its sentence");
  }
  return out;
}

template <typename E>
std::vector<E> read_rows(const std::filesystem::path& path, E (*parse)(const json&)) {
  std::vector<E> out;
  for_each_jsonl(path, [&](std::size_t line, const json& j) {
    try {
      out.push_back(parse(j));
    } catch (const SchemaError& e) {
      throw SchemaError(path.string() + ":" + std::to_string(line) + ": " + e.what());
    }
  });
  return out;
}

}  // namespace

NerExample ner_from_json(const json& j) {
  NerExample e;
  const json& tokens = field(j, "tokens");
  const json& labels = field(j, "labels");
  if (!tokens.is_array() || !labels.is_array()) throw SchemaError("'tokens' and 'labels' must be arrays");
  if (tokens.size() != labels.size()) {
    throw SchemaError(std::to_string(tokens.size()) + " tokens but " + std::to_string(labels.size()) + " labels");
  }
  for (const auto& t : tokens) {
    if (!t.is_string() || t.get<std::string>().empty()) throw SchemaError("tokens must be non-empty strings");
    e.tokens.push_back(t.get<std::string>());
  }
  for (const auto& l : labels) {
    if (!l.is_string()) throw SchemaError("labels must be strings");
    e.labels.push_back(l.get<std::string>());
  }
  if (!is_well_formed_bio(e.labels)) throw SchemaError("I- label without a preceding B- or I- of its category");
  return e;
}

ReExample re_from_json(const json& j) {
  ReExample e;
  e.s1 = str(j, "s1");
  e.s2 = str(j, "s2");
  e.c1 = offsets(j, "c1", e.s1.size());
  e.c2 = offsets(j, "c2", e.s2.size());
  e.label = str(j, "label");
  return e;
}

StsExample sts_from_json(const json& j) {
  StsExample e;
  e.a = str(j, "a");
  e.b = str(j, "b");
  const json& s = field(j, "score");
  if (!s.is_number()) throw SchemaError("'score' must be a number");
  e.score = s.get<double>();
  if (!(e.score >= kStsMin && e.score <= kStsMax)) {
    throw SchemaError("score " + std::to_string(e.score) + " outside [0, 5]");
  }
  return e;
}

NliExample nli_from_json(const json& j) {
  NliExample e{str(j, "premise"), str(j, "hypothesis"), str(j, "label")};
  const auto& labels = nli_labels();
  if (std::find(labels.begin(), labels.end(), e.label) == labels.end()) {
    throw SchemaError("NLI label '" + e.label + "' is not entailment, contradiction or neutral");
  }
  return e;
}

QaExample qa_from_json(const json& j) {
  QaExample e;
  e.question = str(j, "question");
  e.context = str(j, "context");
  const json& answers = field(j, "answers");
  if (!answers.is_array()) throw SchemaError("'answers' must be an array");
  for (const auto& a : answers) {
    QaAnswer ans;
    const json& start = field(a, "start");
    if (!start.is_number_unsigned()) throw SchemaError("answer 'start' must be a non-negative integer");
    ans.start = start.get<std::size_t>();
    ans.text = str(a, "text");
    if (ans.text.empty() || ans.start + ans.text.size() > e.context.size() ||
        e.context.compare(ans.start, ans.text.size(), ans.text) != 0) {
      throw SchemaError("answer '" + ans.text + "' does not match the context at byte " + std::to_string(ans.start));
    }
    e.answers.push_back(std::move(ans));
  }
  return e;
}

std::vector<NerExample> read_ner(const std::filesystem::path& p) { return read_rows(p, &ner_from_json); }
std::vector<ReExample> read_re(const std::filesystem::path& p) { return read_rows(p, &re_from_json); }
std::vector<StsExample> read_sts(const std::filesystem::path& p) { return read_rows(p, &sts_from_json); }
std::vector<NliExample> read_nli(const std::filesystem::path& p) { return read_rows(p, &nli_from_json); }
std::vector<QaExample> read_qa(const std::filesystem::path& p) { return read_rows(p, &qa_from_json); }

json to_json(const NerExample& e) { return {{"tokens", e.tokens}, {"labels", e.labels}}; }

json to_json(const ReExample& e) {
  return {{"s1", e.s1},
          {"s2", e.s2},
          {"c1", {e.c1.first, e.c1.second}},
          {"c2", {e.c2.first, e.c2.second}},
          {"label", e.label}};
}

json to_json(const StsExample& e) { return {{"a", e.a}, {"b", e.b}, {"score", e.score}}; }

json to_json(const NliExample& e) {
  return {{"premise", e.premise}, {"hypothesis", e.hypothesis}, {"label", e.label}};
}

json to_json(const QaExample& e) {
  json answers = json::array();
  for (const auto& a : e.answers) answers.push_back({{"start", a.start}, {"text", a.text}});
  return {{"question", e.question}, {"context", e.context}, {"answers", answers}};
}

// --- synthetic fixtures ------------------------------------------------------

namespace {

const std::array<const char*, 8> kDrugs{"aspirin", "metformin", "lisinopril", "warfarin",
                                        "heparin", "insulin",   "amoxicillin", "prednisone"};
const std::array<const char*, 8> kProblems{"hypertension", "diabetes", "pneumonia", "fever",
                                           "chest pain",   "atrial fibrillation", "cellulitis", "asthma"};
const std::array<const char*, 6> kDoses{"81 mg", "500 mg", "10 mg", "5 mg", "2 units", "40 mg"};
const std::array<const char*, 6> kAdes{"rash", "bleeding", "nausea", "cough", "dizziness", "hypoglycemia"};
const std::array<const char*, 6> kRoutes{"orally", "intravenously", "subcutaneously", "daily", "nightly", "weekly"};

template <std::size_t N>
const char* pick(Rng& rng, const std::array<const char*, N>& options) {
  return options[rng.uniform_int(N)];
}

// Appends whitespace-separated words with one label per word.
void add_phrase(NerExample& e, const std::string& phrase, const std::string& category) {
  std::size_t pos = 0;
  bool first = true;
  while (pos < phrase.size()) {
    std::size_t next = phrase.find(' ', pos);
    if (next == std::string::npos) next = phrase.size();
    e.tokens.push_back(phrase.substr(pos, next - pos));
    e.labels.push_back(category.empty() ? "O" : (first ? "B-" : "I-") + category);
    first = false;
    pos = next + 1;
  }
}

struct Builder {
  std::string text;
  std::pair<std::size_t, std::size_t> add(const std::string& piece) {
    if (!text.empty()) text.push_back(' ');
    std::size_t start = text.size();
    text += piece;
    return {start, text.size()};
  }
};

}  // namespace

std::vector<NerExample> synthetic_ner(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<NerExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    NerExample e;
    switch (rng.uniform_int(3)) {
      case 0:
        add_phrase(e, "patient started on", "");
        add_phrase(e, pick(rng, kDrugs), "Drug");
        add_phrase(e, pick(rng, kDoses), "Dosage");
        add_phrase(e, "for", "");
        add_phrase(e, pick(rng, kProblems), "Problem");
        break;
      case 1:
        add_phrase(e, "history of", "");
        add_phrase(e, pick(rng, kProblems), "Problem");
        add_phrase(e, "treated with", "");
        add_phrase(e, pick(rng, kDrugs), "Drug");
        break;
      default:
        add_phrase(e, "continue", "");
        add_phrase(e, pick(rng, kDrugs), "Drug");
        add_phrase(e, pick(rng, kDoses), "Dosage");
        add_phrase(e, pick(rng, kRoutes), "");
        break;
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ReExample> synthetic_re(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ReExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    ReExample e;
    Builder b;
    std::string drug = pick(rng, kDrugs);
    switch (rng.uniform_int(4)) {
      case 0: {  // same sentence, adverse event
        b.add("patient developed");
        auto ade = b.add(pick(rng, kAdes));
        b.add("after starting");
        auto d = b.add(drug);
        e.s1 = e.s2 = b.text;
        e.c1 = d;
        e.c2 = ade;
        e.label = "ADE-Drug";
        break;
      }
      case 1: {  // same sentence, reason
        b.add("started");
        auto d = b.add(drug);
        b.add("for");
        auto r = b.add(pick(rng, kProblems));
        e.s1 = e.s2 = b.text;
        e.c1 = d;
        e.c2 = r;
        e.label = "Reason-Drug";
        break;
      }
      case 2: {  // adjacent sentences, dosage
        Builder b2;
        b.add("we will continue");
        e.c1 = b.add(drug);
        b2.add("the dose is");
        e.c2 = b2.add(pick(rng, kDoses));
        e.s1 = b.text;
        e.s2 = b2.text;
        e.label = "Dosage-Drug";
        break;
      }
      default: {  // mentioned together without a relation
        b.add("no");
        auto ade = b.add(pick(rng, kAdes));
        b.add("was noted and");
        auto d = b.add(drug);
        b.add("was held");
        e.s1 = e.s2 = b.text;
        e.c1 = d;
        e.c2 = ade;
        e.label = kNoRelation;
        break;
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<StsExample> synthetic_sts(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<StsExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    // Five slots; the score is the number of slots both sentences share.
    std::array<std::string, 5> a{pick(rng, kDrugs), pick(rng, kDoses), pick(rng, kRoutes), pick(rng, kProblems),
                                 pick(rng, kAdes)};
    std::array<std::string, 5> b = a;
    std::size_t shared = 5;
    for (std::size_t s = 0; s < 5; ++s) {
      if (!rng.bernoulli(0.5)) continue;
      std::string replacement;
      switch (s) {
        case 0: replacement = pick(rng, kDrugs); break;
        case 1: replacement = pick(rng, kDoses); break;
        case 2: replacement = pick(rng, kRoutes); break;
        case 3: replacement = pick(rng, kProblems); break;
        default: replacement = pick(rng, kAdes); break;
      }
      if (replacement != b[s]) {
        b[s] = replacement;
        --shared;
      }
    }
    auto render = [](const std::array<std::string, 5>& s) {
      return "take " + s[0] + " " + s[1] + " " + s[2] + " for " + s[3] + " watch for " + s[4];
    };
    out.push_back({render(a), render(b), static_cast<double>(shared)});
  }
  return out;
}

std::vector<NliExample> synthetic_nli(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<NliExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string problem = pick(rng, kProblems);
    std::string drug = pick(rng, kDrugs);
    NliExample e;
    e.premise = "the patient was admitted with " + problem + " and given " + drug;
    switch (i % 3) {
      case 0:
        e.hypothesis = "the patient has " + problem;
        e.label = "entailment";
        break;
      case 1:
        e.hypothesis = "the patient has no " + problem;
        e.label = "contradiction";
        break;
      default:
        e.hypothesis = "the patient has a family history of " + problem;
        e.label = "neutral";
        break;
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<QaExample> synthetic_qa(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<QaExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string drug = pick(rng, kDrugs);
    std::string dose = pick(rng, kDoses);
    Builder b;
    // Filler before and after the answer so that contexts span several
    // windows under small window settings.
    std::size_t before = rng.uniform_int(4);
    for (std::size_t k = 0; k < before; ++k) b.add(std::string("history of ") + pick(rng, kProblems) + " .");
    b.add("the patient takes");
    b.add(drug);
    auto answer = b.add(dose);
    b.add(pick(rng, kRoutes));
    b.add(".");
    std::size_t after = rng.uniform_int(4);
    for (std::size_t k = 0; k < after; ++k) b.add(std::string("no ") + pick(rng, kAdes) + " reported .");
    QaExample e;
    e.question = "what dose of " + drug + " does the patient take ?";
    e.context = b.text;
    e.answers.push_back({answer.first, dose});
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace clinlm::tasks

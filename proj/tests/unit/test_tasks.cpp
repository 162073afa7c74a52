// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <set>

#include "clinlm/common/error.hpp"
#include "clinlm/common/io.hpp"
#include "clinlm/common/rng.hpp"
#include "support/task_fixtures.hpp"

using namespace clinlm;
using namespace clinlm::tasks;
using metrics::Span;

namespace {

// Random non-overlapping spans over n tokens.
std::vector<Span> random_spans(Rng& rng, std::size_t n) {
  std::vector<Span> out;
  const char* cats[] = {"Drug", "Problem", "Test"};
  std::size_t i = 0;
  while (i < n) {
    if (rng.bernoulli(0.4)) {
      std::size_t len = 1 + rng.uniform_int(std::min<std::size_t>(3, n - i));
      out.push_back({i, i + len, cats[rng.uniform_int(3)]});
      i += len;
    }
    i += rng.uniform_int(2);
  }
  return out;
}

// Stack-based parser: every marker opens or closes its own pair exactly
// once and pairs do not interleave.
bool balanced_markers(const std::string& text, const std::string& open, const std::string& close) {
  std::vector<std::string> words;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t next = text.find(' ', pos);
    if (next == std::string::npos) next = text.size();
    if (next > pos) words.push_back(text.substr(pos, next - pos));
    pos = next + 1;
  }
  int depth = 0, opened = 0;
  for (const auto& w : words) {
    if (w == open) {
      if (depth != 0) return false;
      ++depth;
      ++opened;
    } else if (w == close) {
      if (depth != 1) return false;
      --depth;
    } else if (w.find('[') != std::string::npos && (w == kS1 || w == kE1 || w == kS2 || w == kE2)) {
      return false;
    }
  }
  return depth == 0 && opened == 1;
}

// Exhaustive pair census, written independently of generate_candidates.
std::size_t brute_force_pairs(const std::vector<Concept>& cs, const CandidateRules& r) {
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < cs.size(); ++a)
    for (std::size_t b = 0; b < cs.size(); ++b) {
      if (a == b) continue;
      long gap = static_cast<long>(cs[a].sentence) - static_cast<long>(cs[b].sentence);
      if (std::labs(gap) > static_cast<long>(r.max_sentence_gap)) continue;
      if (r.allowed.count({cs[a].type, cs[b].type}) == 0) continue;
      pairs.insert({std::min(a, b), std::max(a, b)});
    }
  return pairs.size();
}

struct Shared {
  testing::TaskData data;
  bpe::Vocabulary vocab = testing::task_vocab(data);
  model::Encoder<float> encoder = testing::task_encoder(vocab);
};

Shared& shared() {
  static Shared s;
  return s;
}

FinetuneConfig overfit_config() {
  FinetuneConfig cfg;
  cfg.qa = testing::small_windows();
  return cfg;
}

}  // namespace

TEST_CASE("BIO encoding follows the begin/inside convention") {
  std::vector<Span> drug{{0, 2, "drug"}};
  CHECK(bio_encode(2, drug) == std::vector<std::string>{"B-drug", "I-drug"});
  CHECK(bio_decode(std::vector<std::string>(4, "O")).empty());
  auto repaired = bio_decode(std::vector<std::string>{"O", "I-drug", "I-drug"});
  REQUIRE(repaired.size() == 1);
  CHECK(repaired[0] == Span{1, 3, "drug"});
  auto split = bio_decode(std::vector<std::string>{"B-drug", "I-test", "I-test"});
  CHECK(split == std::vector<Span>{{0, 1, "drug"}, {1, 3, "test"}});
  CHECK(bio_label_set({"Test", "Drug"}) == std::vector<std::string>{"O", "B-Drug", "I-Drug", "B-Test", "I-Test"});
  CHECK_THROWS_AS(bio_decode(std::vector<std::string>{"X-drug"}), SchemaError);
}

TEST_CASE("BIO round trip is the identity on well-formed labels") {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::size_t n = 1 + rng.uniform_int(20);
    auto spans = random_spans(rng, n);
    auto labels = bio_encode(n, spans);
    CHECK(is_well_formed_bio(labels));
    CHECK(bio_decode(labels) == spans);
    CHECK(bio_encode(n, bio_decode(labels)) == labels);
  }
}

TEST_CASE("overlapping spans point at per-category mode") {
  std::vector<Span> spans{{0, 2, "Drug"}, {1, 3, "Problem"}};
  try {
    bio_encode(4, spans);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("per-category") != std::string::npos);
  }
}

TEST_CASE("candidate pairs follow the allowlist and the sentence gap") {
  auto rules = default_candidate_rules();
  std::vector<Concept> same{{0, 0, 5, "Drug"}, {0, 10, 14, "ADE"}};
  CHECK(generate_candidates(same, rules).size() == 1);
  std::vector<Concept> drugs{{0, 0, 5, "Drug"}, {0, 10, 14, "Drug"}};
  CHECK(generate_candidates(drugs, rules).empty());
  std::vector<Concept> far{{0, 0, 5, "Drug"}, {3, 0, 4, "ADE"}};
  CHECK(generate_candidates(far, rules).empty());
  std::vector<Concept> near{{2, 0, 5, "Reason"}, {3, 0, 4, "Drug"}};
  CHECK(generate_candidates(near, rules) == std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}});

  Rng rng(8);
  const char* types[] = {"Drug", "ADE", "Reason", "Dosage", "Problem"};
  for (int doc = 0; doc < 50; ++doc) {
    std::vector<Concept> cs;
    std::size_t n = rng.uniform_int(25);
    for (std::size_t i = 0; i < n; ++i) cs.push_back({rng.uniform_int(6), 0, 1, types[rng.uniform_int(5)]});
    std::sort(cs.begin(), cs.end(), [](const Concept& a, const Concept& b) { return a.sentence < b.sentence; });
    rules.max_sentence_gap = rng.uniform_int(3);
    auto got = generate_candidates(cs, rules);
    CHECK(got.size() == brute_force_pairs(cs, rules));
    CHECK(std::is_sorted(got.begin(), got.end()));
    CHECK(got == generate_candidates(cs, rules));
  }
}

TEST_CASE("entity markers wrap each concept once") {
  std::string s = "aspirin caused a rash";
  auto same = mark_entities(s, {0, 7}, s, {17, 21});
  CHECK(same.s1 == "[S1] aspirin [E1] caused a rash");
  CHECK(same.s2 == "aspirin caused a [S2] rash [E2]");

  auto cross = mark_entities("continue heparin", {9, 16}, "dose is 5 mg", {8, 12});
  CHECK(cross.s1 == "continue [S1] heparin [E1]");
  CHECK(cross.s2 == "dose is [S2] 5 mg [E2]");

  // A span ending inside a word is widened to the whole word.
  auto widened = mark_entities("metformin daily", {2, 5}, "x", {0, 1});
  CHECK(widened.s1 == "[S1] metformin [E1] daily");

  CHECK_THROWS_AS(mark_entities(s, {3, 3}, s, {0, 1}), ValueError);
  CHECK_THROWS_AS(mark_entities(s, {0, 99}, s, {0, 1}), ValueError);
}

TEST_CASE("marked sentences always parse as balanced pairs") {
  Rng rng(21);
  const char* words[] = {"a", "bb", "ccc", "dose", "mg", "x"};
  for (int trial = 0; trial < 1000; ++trial) {
    std::string s;
    std::size_t n = 1 + rng.uniform_int(8);
    for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + std::string(words[rng.uniform_int(6)]);
    auto span = [&] {
      std::size_t a = rng.uniform_int(s.size());
      std::size_t b = a + 1 + rng.uniform_int(s.size() - a);
      return std::make_pair(a, b);
    };
    auto c1 = span(), c2 = span();
    auto m = mark_entities(s, c1, s, c2);
    CHECK(balanced_markers(m.s1, kS1, kE1));
    CHECK(balanced_markers(m.s2, kS2, kE2));
  }
}

TEST_CASE("window starts and overlap") {
  CHECK(window_starts(400, 446, 396) == std::vector<std::size_t>{0});
  CHECK(window_starts(842, 446, 396) == std::vector<std::size_t>{0, 396});
  CHECK(0 + 446 - 396 == 50);
  CHECK(window_starts(1000, 446, 396) == std::vector<std::size_t>{0, 396, 792});

  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t len = 1 + rng.uniform_int(3000);
    std::size_t window = trial == 0 ? 446 : 1 + rng.uniform_int(600);
    std::size_t stride = trial == 0 ? 396 : 1 + rng.uniform_int(window);
    auto starts = window_starts(len, window, stride);
    std::vector<int> census(len, 0);
    for (auto s : starts)
      for (std::size_t t = s; t < std::min(len, s + window); ++t) ++census[t];
    CHECK(std::all_of(census.begin(), census.end(), [](int c) { return c >= 1; }));
    for (std::size_t k = 0; k + 1 < starts.size(); ++k) {
      std::size_t end_k = starts[k] + window;
      bool last_is_short = starts[k + 1] + window > len;
      if (!last_is_short) CHECK(end_k - starts[k + 1] == window - stride);
      CHECK(end_k < len);
    }
  }
}

TEST_CASE("window budget respects max_seq_len") {
  QaWindowing w;
  auto fits = plan_windows(w, 10, 1024);
  CHECK(fits.window == 446);
  CHECK(fits.stride == 396);
  auto plan = plan_windows(w, 80, 512);  // 1 + 64 + 1 + 446 + 1 = 513
  CHECK(plan.question == 64);
  CHECK(plan.window == 445);
  CHECK(plan.stride == 395);
  CHECK(plan.window - plan.stride == 50);
  CHECK_THROWS_AS(plan_windows({64, 0, 0, 32}, 5, 512), ConfigError);
  CHECK_THROWS_AS(plan_windows({64, 10, 20, 32}, 5, 512), ConfigError);

  std::vector<std::int32_t> q{7, 8, 9}, ctx(30);
  for (std::size_t i = 0; i < ctx.size(); ++i) ctx[i] = 100 + static_cast<std::int32_t>(i);
  auto wins = qa_windows(q, ctx, {2, 12, 8, 4}, 64, 1, 2);
  REQUIRE(wins.size() == 4);
  CHECK(wins[0].ids == std::vector<std::int32_t>{1, 7, 8, 2, 100, 101, 102, 103, 104, 105, 106, 107, 108, 109, 110,
                                                  111, 2});
  CHECK(wins[0].context_offset == 4);
  CHECK(wins[0].segments[3] == 0);
  CHECK(wins[0].segments[4] == 1);
  CHECK(wins[3].start == 24);
  CHECK(wins[3].length == 6);
  for (const auto& win : wins) CHECK(win.ids.size() <= 64);
}

TEST_CASE("span choice honours the answer-length limit") {
  std::vector<float> start(50, 0.0F), end(50, 0.0F);
  start[2] = 10.0F;
  end[40] = 10.0F;  // j - i = 38 is out of reach
  end[5] = 3.0F;
  auto s = best_span(start, end, 0, 50, 32);
  REQUIRE(s.found);
  CHECK(s.start == 2);
  CHECK(s.end == 5);
  CHECK(best_span(start, end, 0, 50, 64).end == 40);
  CHECK_FALSE(best_span(start, end, 10, 0, 32).found);
  std::vector<float> flat(6, 1.0F);
  auto tie = best_span(flat, flat, 1, 4, 32);
  CHECK(tie.start == 1);
  CHECK(tie.end == 1);
}

TEST_CASE("pair packing") {
  auto& s = shared();
  auto p = pack_pair(s.vocab, "aspirin for fever", "the patient has fever", 128);
  CHECK(p.ids.front() == s.vocab.cls_id());
  CHECK(p.ids.back() == s.vocab.sep_id());
  CHECK(std::count(p.ids.begin(), p.ids.end(), s.vocab.sep_id()) == 2);
  auto first_sep = std::find(p.ids.begin(), p.ids.end(), s.vocab.sep_id()) - p.ids.begin();
  CHECK(p.segments[static_cast<std::size_t>(first_sep)] == 0);
  CHECK(p.segments[static_cast<std::size_t>(first_sep) + 1] == 1);
  auto cut = pack_pair(s.vocab, "aspirin for fever and more fever and more", "fever", 9);
  CHECK(cut.ids.size() == 9);
  CHECK_THROWS_AS(pack_pair(s.vocab, "a", "b", 4), ConfigError);

  // Hypothesis and premise order is part of the encoding.
  NliExample e{"the patient was admitted with fever", "the patient has fever", "entailment"};
  CHECK(pack_pair(s.vocab, e.hypothesis, e.premise, 128).ids != pack_pair(s.vocab, e.premise, e.hypothesis, 128).ids);

  auto re = pack_relation(s.vocab, s.data.re[0], 128);
  auto m = find_markers(s.vocab, re.ids);
  CHECK(m.s1 < m.e1);
  CHECK(m.s2 < m.e2);
  auto plain = pack_pair(s.vocab, s.data.re[0].s1, s.data.re[0].s2, 128);
  CHECK_THROWS_AS(find_markers(s.vocab, plain.ids), ValueError);
}

TEST_CASE("NER inputs label the first subword of each word") {
  auto& s = shared();
  std::vector<std::string> words{"amoxicillin", "for", "cellulitis"};
  auto in = pack_ner(s.vocab, words, 128);
  REQUIRE(in.word_starts.size() == 3);
  CHECK(in.word_starts[0] == 1);
  CHECK(in.packed.ids.size() == 2 + s.vocab.encode("amoxicillin for cellulitis").ids.size());
  auto cut = pack_ner(s.vocab, words, 4);
  CHECK(cut.packed.ids.size() <= 4);
  CHECK(cut.word_starts.size() < 3);
}

TEST_CASE("datasets round trip through JSONL and reject bad rows") {
  auto& s = shared();
  for (const auto& e : s.data.ner) CHECK(to_json(ner_from_json(to_json(e))) == to_json(e));
  for (const auto& e : s.data.re) CHECK(to_json(re_from_json(to_json(e))) == to_json(e));
  for (const auto& e : s.data.sts) CHECK(to_json(sts_from_json(to_json(e))) == to_json(e));
  for (const auto& e : s.data.nli) CHECK(to_json(nli_from_json(to_json(e))) == to_json(e));
  for (const auto& e : s.data.qa) {
    CHECK(to_json(qa_from_json(to_json(e))) == to_json(e));
    for (const auto& a : e.answers) CHECK(e.context.substr(a.start, a.text.size()) == a.text);
  }
  for (const auto& e : s.data.re) {
    CHECK(e.s1.substr(e.c1.first, e.c1.second - e.c1.first).find(' ') != 0);
  }

  using nlohmann::json;
  CHECK_THROWS_AS(ner_from_json(json{{"tokens", {"a", "b"}}, {"labels", {"O", "I-Drug"}}}), SchemaError);
  CHECK_THROWS_AS(ner_from_json(json{{"tokens", {"a"}}, {"labels", {"O", "O"}}}), SchemaError);
  CHECK_THROWS_AS(sts_from_json(json{{"a", "x"}, {"b", "y"}, {"score", 5.5}}), SchemaError);
  CHECK_THROWS_AS(nli_from_json(json{{"premise", "x"}, {"hypothesis", "y"}, {"label", "maybe"}}), SchemaError);
  CHECK_THROWS_AS(qa_from_json(json{{"question", "q"}, {"context", "abc"}, {"answers", {{{"start", 1}, {"text", "c"}}}}}),
                  SchemaError);
  CHECK_THROWS_AS(re_from_json(json{{"s1", "ab"}, {"s2", "cd"}, {"c1", {0, 3}}, {"c2", {0, 1}}, {"label", "x"}}),
                  SchemaError);

  auto dir = std::filesystem::temp_directory_path() / "clinlm_task_rows";
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "bad.jsonl", "{\"a\":\"x\",\"b\":\"y\",\"score\":1}\n{\"a\":\"x\",\"b\":\"y\"}\n");
  try {
    read_sts(dir / "bad.jsonl");
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("NER heads overfit in both modes") {
  auto& s = shared();
  auto cfg = overfit_config();
  auto unified = finetune_ner(s.encoder, s.vocab, s.data.ner, cfg);
  auto f1 = score_ner(s.data.ner, predict_ner(unified, s.vocab, s.data.ner))["metrics"]["f1"].get<double>();
  MESSAGE("unified NER F1 " << f1);
  CHECK(f1 >= 0.99);

  // Padding positions do not contribute to the loss.
  double base = ner_loss(unified, s.vocab, s.data.ner);
  CHECK(ner_loss(unified, s.vocab, s.data.ner, 96) == doctest::Approx(base).epsilon(1e-5));

  cfg.ner_mode = NerMode::kPerCategory;
  auto per = finetune_ner(s.encoder, s.vocab, s.data.ner, cfg);
  CHECK(per.models.size() == 3);
  CHECK(per.models[0].labels.size() == 3);
  auto f1_per = score_ner(s.data.ner, predict_ner(per, s.vocab, s.data.ner))["metrics"]["f1"].get<double>();
  MESSAGE("per-category NER F1 " << f1_per);
  CHECK(f1_per >= 0.99);
}

TEST_CASE("relation head overfits and uses a 5H feature") {
  auto& s = shared();
  auto ft = finetune_re(s.encoder, s.vocab, s.data.re, overfit_config());
  CHECK(ft.models[0].head.weight.dim(0) == 5 * 64);
  auto pred = predict_re(ft, s.vocab, s.data.re);
  for (const auto& p : pred) {
    double total = 0.0;
    for (double x : p.probabilities) total += x;
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  auto f1 = score_re(s.data.re, pred)["metrics"]["f1"].get<double>();
  MESSAGE("RE F1 " << f1);
  CHECK(f1 >= 0.99);

  auto packed = pack_relation(s.vocab, s.data.re[0], 128);
  CHECK(pair_logits(ft, s.vocab, packed) == pair_logits(ft, s.vocab, packed));
  // Swapping two context tokens far from the markers still reaches the logits.
  auto m = find_markers(s.vocab, packed.ids);
  auto moved = packed;
  std::size_t a = m.e2 + 1, b = moved.ids.size() - 2;
  if (a < b && moved.ids[a] != moved.ids[b]) {
    std::swap(moved.ids[a], moved.ids[b]);
    CHECK(pair_logits(ft, s.vocab, moved) != pair_logits(ft, s.vocab, packed));
  }
}

TEST_CASE("similarity head overfits") {
  auto& s = shared();
  auto cfg = overfit_config();
  cfg.epochs = 150;
  auto ft = finetune_sts(s.encoder, s.vocab, s.data.sts, cfg);
  auto pred = predict_sts(ft, s.vocab, s.data.sts);
  CHECK(pred.size() == s.data.sts.size());
  double r = score_sts(s.data.sts, pred)["metrics"]["pearson"].get<double>();
  MESSAGE("STS Pearson " << r);
  CHECK(r >= 0.99);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    CHECK(pred[i] >= kStsMin);
    CHECK(pred[i] <= kStsMax);
    if (s.data.sts[i].a == s.data.sts[i].b) CHECK(pred[i] >= 4.5);
  }
}

TEST_CASE("inference head overfits") {
  auto& s = shared();
  auto ft = finetune_nli(s.encoder, s.vocab, s.data.nli, overfit_config());
  auto pred = predict_nli(ft, s.vocab, s.data.nli);
  for (const auto& p : pred) {
    double total = 0.0;
    for (double x : p.probabilities) total += x;
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  double acc = score_nli(s.data.nli, pred)["metrics"]["accuracy"].get<double>();
  MESSAGE("NLI accuracy " << acc);
  CHECK(acc == 1.0);
}

TEST_CASE("QA head overfits, including answers past a window boundary") {
  auto& s = shared();
  auto cfg = overfit_config();
  auto data = s.data.qa;
  // An answer cut by the end of one window that sits inside the overlap of
  // the next.
  auto straddles = [&](const QaExample& e) {
    auto ctx = s.vocab.encode(e.context);
    auto plan = plan_windows(cfg.qa, s.vocab.encode(e.question).ids.size(), 128);
    auto starts = window_starts(ctx.ids.size(), plan.window, plan.stride);
    std::size_t a = e.answers[0].start, b = a + e.answers[0].text.size();
    std::size_t first = ctx.offsets.size(), last = 0;
    for (std::size_t t = 0; t < ctx.offsets.size(); ++t) {
      if (ctx.offsets[t].first < b && ctx.offsets[t].second > a) {
        first = std::min(first, t);
        last = t;
      }
    }
    for (std::size_t k = 0; k + 1 < starts.size(); ++k) {
      bool cut = first < starts[k] + plan.window && last >= starts[k] + plan.window;
      bool inside_next = first >= starts[k + 1] && last < starts[k + 1] + plan.window;
      if (cut && inside_next) return true;
    }
    return false;
  };
  std::optional<std::size_t> crossing;
  for (std::size_t n = 0; n < 30 && !crossing; ++n) {
    QaExample e;
    e.question = "what dose of heparin does the patient take ?";
    for (std::size_t k = 0; k < n; ++k) e.context += ". ";
    e.context += "the patient takes heparin ";
    e.answers.push_back({e.context.size(), "5000 units"});
    e.context += "5000 units subcutaneously . no rash reported .";
    if (straddles(e)) {
      data.back() = e;
      crossing = data.size() - 1;
    }
  }
  REQUIRE(crossing.has_value());

  auto ft = finetune_qa(s.encoder, s.vocab, data, cfg);
  auto pred = predict_qa(ft, s.vocab, data);
  double em = score_qa(data, pred)["metrics"]["exact_match"].get<double>();
  MESSAGE("QA EM " << em);
  CHECK(em >= 0.95);
  CHECK(pred[*crossing].text == "5000 units");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].found) CHECK(data[i].context.substr(pred[i].start, pred[i].end - pred[i].start) == pred[i].text);
  }

  QaExample empty{"what dose ?", "", {}};
  auto none = predict_qa(ft, s.vocab, std::vector<QaExample>{empty});
  CHECK_FALSE(none[0].found);
  CHECK(none[0].text.empty());
}

TEST_CASE("fine-tuned models survive a save and load") {
  auto& s = shared();
  auto cfg = overfit_config();
  cfg.epochs = 2;
  auto dir = std::filesystem::temp_directory_path() / "clinlm_task_model";
  std::filesystem::remove_all(dir);
  auto ft = finetune_nli(s.encoder, s.vocab, s.data.nli, cfg);
  save_finetuned(dir, ft, {{"tokenizer", "abc"}});
  auto back = load_finetuned(dir);
  CHECK(back.task == Task::kNli);
  auto a = predict_nli(ft, s.vocab, s.data.nli);
  auto b = predict_nli(back, s.vocab, s.data.nli);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].probabilities == b[i].probabilities);
  CHECK_THROWS_AS(predict_sts(back, s.vocab, s.data.sts), ConfigError);

  cfg.ner_mode = NerMode::kPerCategory;
  auto ner = finetune_ner(s.encoder, s.vocab, s.data.ner, cfg);
  std::filesystem::remove_all(dir);
  save_finetuned(dir, ner);
  auto ner_back = load_finetuned(dir);
  CHECK(ner_back.categories == ner.categories);
  CHECK(predict_ner(ner_back, s.vocab, s.data.ner) == predict_ner(ner, s.vocab, s.data.ner));
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_finetuned(dir), IoError);
  CHECK(parse_task("qa") == Task::kQa);
  CHECK_THROWS_AS(parse_task("summarize"), ConfigError);
}

// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <string>
#include <vector>

#include "clinlm/common/error.hpp"
#include "clinlm/common/rng.hpp"
#include "clinlm/tokenizer/bpe.hpp"
#include "support/bpe_oracle.hpp"

using namespace clinlm;
using bpe::Vocabulary;

namespace {

std::vector<std::string> tokens_of(const Vocabulary& v, std::string_view text) {
  std::vector<std::string> out;
  for (auto id : v.encode(text).ids) out.push_back(v.token(id));
  return out;
}

std::vector<std::string> random_corpus(Rng& rng, std::size_t n_lines, std::string_view letters) {
  std::vector<std::string> lines;
  for (std::size_t l = 0; l < n_lines; ++l) {
    std::string line;
    std::size_t n_words = 1 + rng.uniform_int(8);
    for (std::size_t w = 0; w < n_words; ++w) {
      if (w) line += rng.bernoulli(0.1) ? "  " : " ";
      std::size_t len = 1 + rng.uniform_int(6);
      for (std::size_t c = 0; c < len; ++c) line += letters[rng.uniform_int(letters.size())];
    }
    if (rng.bernoulli(0.2)) line += "\n";
    lines.push_back(line);
  }
  return lines;
}

std::size_t base_size(const Vocabulary& v) { return v.specials().size() + v.alphabet_size(); }

}  // namespace

TEST_CASE("abab corpus merges (a,b) first") {
  std::vector<std::string> corpus = {"abab abab"};
  auto probe = bpe::train_bpe(corpus, 1000);
  auto one = probe.truncated(base_size(probe) + 1);
  REQUIRE(one.merges().size() == 1);
  CHECK(one.merges()[0] == std::pair<std::string, std::string>{"a", "b"});
  // End-of-word marking keeps the final "b" distinct, so one merge yields ab a b</w>.
  CHECK(tokens_of(one, "abab") == std::vector<std::string>{"ab", "a", "b</w>"});
  auto two = probe.truncated(base_size(probe) + 2);
  CHECK(two.merges()[1] == std::pair<std::string, std::string>{"a", "b</w>"});
  CHECK(tokens_of(two, "abab") == std::vector<std::string>{"ab", "ab</w>"});
}

TEST_CASE("zero merges gives a character-level vocabulary") {
  std::vector<std::string> corpus = {"hello world", "low"};
  auto probe = bpe::train_bpe(corpus, 1000);
  auto v = bpe::train_bpe(corpus, base_size(probe));
  CHECK(v.merges().empty());
  CHECK(v.size() == base_size(probe));
  CHECK(v.encode("hello").ids.size() == 5);
  CHECK(v.encode("").ids.empty());
  CHECK(v.decode(v.encode("hello world").ids) == "hello world");
}

TEST_CASE("vocab_size below minimum names the minimum") {
  std::vector<std::string> corpus = {"ab"};
  // specials 9 + whitespace 4 + {a, a</w>, b, b</w>}
  try {
    bpe::train_bpe(corpus, 10);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("need at least 17") != std::string::npos);
  }
}

TEST_CASE("tie broken toward the lexicographically smaller pair") {
  // Every adjacent pair in these words occurs exactly twice.
  std::vector<std::string> corpus = {"xy zw", "xy zw", "qp", "qp", "mn"};
  auto probe = bpe::train_bpe(corpus, 1000);
  auto v = probe.truncated(base_size(probe) + 1);
  auto oracle = testing::naive_bpe_merges(corpus, 1);
  REQUIRE(oracle.size() == 1);
  CHECK(v.merges()[0] == oracle[0]);
  CHECK(v.merges()[0] == std::pair<std::string, std::string>{"q", "p</w>"});
}

TEST_CASE("incremental trainer matches the naive oracle") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    Rng rng(seed);
    auto corpus = random_corpus(rng, 60, seed % 2 ? "abcde" : "abcdefghij");
    auto oracle = testing::naive_bpe_merges(corpus, 10000);
    auto v = bpe::train_bpe(corpus, 1000000);
    CHECK(v.merges() == oracle);
  }
}

TEST_CASE("specials are never merged") {
  std::vector<std::string> corpus = {"[CLS] ab [SEP] ab [SEP]", "[MASK] [MASK]"};
  auto v = bpe::train_bpe(corpus, 1000);
  for (const auto& [l, r] : v.merges()) {
    CHECK(l.find('[') == std::string::npos);
    CHECK(r.find('[') == std::string::npos);
  }
  auto ids = v.encode("[CLS] ab [SEP]").ids;
  REQUIRE(ids.size() == 3);
  CHECK(ids.front() == v.cls_id());
  CHECK(ids.back() == v.sep_id());
  for (std::size_t i = 0; i < v.specials().size(); ++i) CHECK(v.is_special(static_cast<std::int32_t>(i)));
}

TEST_CASE("decode strips padding and renders specials") {
  std::vector<std::string> corpus = {"patient stable", "pain"};
  auto v = bpe::train_bpe(corpus, 60);
  auto body = v.encode("patient stable").ids;
  std::vector<std::int32_t> ids{v.cls_id()};
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(v.sep_id());
  ids.push_back(v.pad_id());
  ids.push_back(v.pad_id());
  CHECK(v.decode(ids) == "[CLS] patient stable [SEP]");
  std::vector<std::int32_t> bad{static_cast<std::int32_t>(v.size())};
  CHECK_THROWS_AS(v.decode(bad), ValueError);
  std::vector<std::int32_t> neg{-1};
  CHECK_THROWS_AS(v.decode(neg), ValueError);
}

TEST_CASE("unknown characters map to [UNK]") {
  std::vector<std::string> corpus = {"abc"};
  auto v = bpe::train_bpe(corpus, 30);
  auto ids = v.encode("abz").ids;
  CHECK(ids.back() == v.unk_id());
  CHECK(v.encode("\v").ids == std::vector<std::int32_t>{v.unk_id()});
}

TEST_CASE("round trip preserves whitespace exactly") {
  Rng rng(11);
  auto corpus = random_corpus(rng, 300, "abcdefgh");
  auto v = bpe::train_bpe(corpus, 200);
  std::vector<std::string> texts = corpus;
  texts.push_back("  ab\t\tcd \n");
  texts.push_back(" ");
  texts.push_back("a\r\nb");
  for (const auto& t : texts) {
    auto enc = v.encode(t);
    CHECK(v.decode(enc.ids) == t);
    REQUIRE(enc.offsets.size() == enc.ids.size());
    std::size_t prev = 0;
    for (const auto& [b, e] : enc.offsets) {
      CHECK(b >= prev);
      CHECK(b < e);
      CHECK(e <= t.size());
      prev = e;
    }
  }
}

TEST_CASE("offsets cover the token's source bytes") {
  std::vector<std::string> corpus = {"aspirin aspirin given", "given"};
  auto v = bpe::train_bpe(corpus, 80);
  std::string text = "aspirin  given";
  auto enc = v.encode(text);
  std::string rebuilt;
  for (std::size_t i = 0; i < enc.ids.size(); ++i) {
    auto [b, e] = enc.offsets[i];
    std::string tok = v.token(enc.ids[i]);
    if (tok.ends_with("</w>")) tok.resize(tok.size() - 4);
    CHECK(text.substr(b, e - b) == tok);
  }
}

TEST_CASE("multi-byte characters are single symbols") {
  std::vector<std::string> corpus = {"café naïve"};
  auto v = bpe::train_bpe(corpus, 1000);
  CHECK(v.decode(v.encode("naïve café").ids) == "naïve café");
  auto zero = v.truncated(base_size(v));
  CHECK(zero.encode("café").ids.size() == 4);
}

TEST_CASE("serialization is deterministic and round trips") {
  Rng rng(5);
  auto corpus = random_corpus(rng, 200, "abcdefg");
  auto a = bpe::train_bpe(corpus, 150);
  auto b = bpe::train_bpe(corpus, 150);
  CHECK(a.serialize() == b.serialize());
  auto text = a.serialize();
  CHECK(text.starts_with("bpe-v1 150\n[PAD]\n[UNK]\n"));
  auto parsed = Vocabulary::parse(text);
  CHECK(parsed.serialize() == text);
  CHECK(parsed.size() == a.size());
  for (const auto& line : corpus) CHECK(parsed.encode(line).ids == a.encode(line).ids);
}

TEST_CASE("malformed vocabulary files are rejected") {
  CHECK_THROWS_AS(Vocabulary::parse(""), SchemaError);
  CHECK_THROWS_AS(Vocabulary::parse("bpe-v2 3\n"), SchemaError);
  std::vector<std::string> corpus = {"ab"};
  auto good = bpe::train_bpe(corpus, 18).serialize();
  auto bad_size = good;
  bad_size.replace(0, good.find('\n'), "bpe-v1 99");
  CHECK_THROWS_AS(Vocabulary::parse(bad_size), SchemaError);
  CHECK_THROWS_AS(Vocabulary::parse(good + "x y\n"), SchemaError);
}

TEST_CASE("truncation equals training to the smaller size") {
  Rng rng(8);
  auto corpus = random_corpus(rng, 400, "abcdefghijk");
  auto big = bpe::train_bpe(corpus, 400);
  for (std::size_t vp : {std::size_t{200}, std::size_t{100}}) {
    CHECK(big.truncated(vp).serialize() == bpe::train_bpe(corpus, vp).serialize());
  }
}

TEST_CASE("word cache agrees with encode") {
  std::vector<std::string> corpus = {"the pain the rash", "rash"};
  auto v = bpe::train_bpe(corpus, 60);
  bpe::WordCache cache(v);
  CHECK(cache.words("the  rash\n pain") == v.encode("the rash pain").ids);
}

// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "clinlm/metrics/metrics.hpp"
#include "support/metric_oracles.hpp"

using namespace clinlm;
using metrics::Span;

TEST_CASE("span_prf basic cases") {
  std::vector<Span> gold = {{0, 2, "drug"}, {3, 4, "drug"}, {5, 7, "problem"}, {8, 9, "test"}};
  auto same = metrics::span_prf(gold, gold).overall;
  CHECK(same.precision == 1.0);
  CHECK(same.recall == 1.0);
  CHECK(same.f1 == 1.0);

  std::vector<Span> half = {gold[0], gold[2]};
  auto r = metrics::span_prf(gold, half).overall;
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 0.5);
  CHECK(r.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  auto vac = metrics::span_prf(std::vector<Span>{}, std::vector<Span>{}).overall;
  CHECK(vac.precision == 1.0);
  CHECK(vac.recall == 1.0);
  CHECK(vac.f1 == 1.0);

  auto none = metrics::span_prf(gold, std::vector<Span>{}).overall;
  CHECK(none.precision == 0.0);
  CHECK(none.f1 == 0.0);
}

TEST_CASE("span_prf is strict and per category") {
  std::vector<Span> gold = {{0, 2, "drug"}, {5, 7, "problem"}};
  std::vector<Span> pred = {{0, 2, "problem"}, {5, 7, "problem"}, {1, 2, "drug"}};
  auto r = metrics::span_prf(gold, pred);
  CHECK(r.overall.true_positives == 1);
  CHECK(r.per_category.at("drug").recall == 0.0);
  CHECK(r.per_category.at("problem").precision == 0.5);
  CHECK(r.per_category.at("problem").recall == 1.0);
}

TEST_CASE("span_prf swaps P and R when gold and pred swap") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    auto g = testing::random_spans(rng, 6), p = testing::random_spans(rng, 6);
    auto a = metrics::span_prf(g, p).overall, b = metrics::span_prf(p, g).overall;
    CHECK(a.precision == b.recall);
    CHECK(a.recall == b.precision);
    CHECK(a.f1 == b.f1);
  }
}

TEST_CASE("metrics are permutation invariant") {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    auto g = testing::random_spans(rng, 8), p = testing::random_spans(rng, 8);
    auto a = metrics::span_prf(g, p).overall;
    rng.shuffle(g);
    rng.shuffle(p);
    CHECK(metrics::span_prf(g, p).overall.f1 == a.f1);
    std::vector<double> x{1, 4, 2, 8, 5}, y{2, 3, 3, 9, 1};
    double r0 = metrics::pearson(x, y);
    std::vector<std::size_t> idx{0, 1, 2, 3, 4};
    rng.shuffle(idx);
    std::vector<double> xs, ys;
    for (auto k : idx) {
      xs.push_back(x[k]);
      ys.push_back(y[k]);
    }
    CHECK(metrics::pearson(xs, ys) == doctest::Approx(r0).epsilon(1e-14));
  }
}

TEST_CASE("pearson known values and errors") {
  std::vector<double> x{1, 2, 3, 4};
  std::vector<double> neg{-1, -2, -3, -4};
  std::vector<double> y{1, 3, 2, 4};
  CHECK(metrics::pearson(x, x) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(metrics::pearson(x, neg) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(metrics::pearson(x, y) == doctest::Approx(0.8).epsilon(1e-14));
  std::vector<double> flat{2, 2, 2, 2};
  CHECK_THROWS_AS(metrics::pearson(x, flat), NumericError);
  std::vector<double> one{1};
  CHECK_THROWS_AS(metrics::pearson(one, one), ValueError);
  CHECK_THROWS_AS(metrics::pearson(x, one), ValueError);
}

TEST_CASE("accuracy counting") {
  std::vector<int> a{0, 1, 2, 1};
  std::vector<int> b{0, 1, 2, 0};
  std::vector<int> c{1, 2, 0, 0};
  CHECK(metrics::accuracy(a, a) == 1.0);
  CHECK(metrics::accuracy(a, b) == 0.75);
  CHECK(metrics::accuracy(a, c) == 0.0);
  std::vector<int> shorter{0};
  CHECK_THROWS_AS(metrics::accuracy(a, shorter), ValueError);
}

TEST_CASE("qa exact match and token F1") {
  std::vector<std::string> gold{"aspirin"};
  auto a = metrics::qa_em_f1(gold, "The aspirin.");
  CHECK(a.exact_match == 1.0);
  CHECK(a.f1 == 1.0);
  auto b = metrics::qa_em_f1(gold, "aspirin 81 mg");
  CHECK(b.exact_match == 0.0);
  CHECK(b.f1 == doctest::Approx(0.5).epsilon(1e-15));
  std::vector<std::string> verbatim{"81 mg daily"};
  CHECK(metrics::qa_em_f1(verbatim, "81 mg daily").exact_match == 1.0);
  CHECK(metrics::normalize_answer("  An  ASPIRIN, the dose ") == "aspirin dose");
  CHECK_THROWS_AS(metrics::qa_em_f1(std::vector<std::string>{}, "x"), ValueError);
}

TEST_CASE("metrics match brute-force oracles") {
  Rng rng(2024);
  for (int i = 0; i < 100; ++i) {
    auto g = testing::random_spans(rng, 7), p = testing::random_spans(rng, 7);
    auto lib = metrics::span_prf(g, p).overall;
    auto ora = testing::oracle_prf(g, p);
    CHECK(std::abs(lib.precision - ora.p) <= 1e-12);
    CHECK(std::abs(lib.recall - ora.r) <= 1e-12);
    CHECK(std::abs(lib.f1 - ora.f) <= 1e-12);

    std::size_t n = 2 + rng.uniform_int(20);
    std::vector<double> x, y;
    for (std::size_t k = 0; k < n; ++k) {
      x.push_back(rng.normal());
      y.push_back(0.5 * x.back() + rng.normal());
    }
    CHECK(std::abs(metrics::pearson(x, y) - testing::oracle_pearson(x, y)) <= 1e-12);

    std::vector<int> la, lb;
    for (std::size_t k = 0; k < n; ++k) {
      la.push_back(static_cast<int>(rng.uniform_int(3)));
      lb.push_back(static_cast<int>(rng.uniform_int(3)));
    }
    CHECK(std::abs(metrics::accuracy(la, lb) - testing::oracle_accuracy(la, lb)) <= 1e-12);

    std::vector<std::string> golds;
    for (std::size_t k = 0, m = 1 + rng.uniform_int(3); k < m; ++k) golds.push_back(testing::random_answer(rng));
    auto pred = testing::random_answer(rng);
    auto q = metrics::qa_em_f1(golds, pred);
    auto [em, f1] = testing::oracle_qa(golds, pred);
    CHECK(q.exact_match == em);
    CHECK(std::abs(q.f1 - f1) <= 1e-12);
  }
}

TEST_CASE("report layout") {
  auto j = metrics::report("ner", {{"f1", 0.5}}, {{"drug", metrics::prf_from_counts(1, 2, 2)}});
  CHECK(j["task"] == "ner");
  CHECK(j["metrics"]["f1"] == 0.5);
  CHECK(j["per_category"]["drug"]["precision"] == 0.5);
}

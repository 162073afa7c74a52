// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "clinlm/cli/cli.hpp"
#include "clinlm/common/io.hpp"
#include "clinlm/corpus/deid.hpp"
#include "clinlm/corpus/synthetic.hpp"
#include "clinlm/corpus/text.hpp"
#include "clinlm/metrics/metrics.hpp"
#include "clinlm/model/config.hpp"
#include "clinlm/parallel/tensor_parallel.hpp"
#include "clinlm/pretrain/pretrain.hpp"
#include "clinlm/tasks/finetune.hpp"
#include "clinlm/tasks/structure.hpp"
#include "clinlm/tensor/ops.hpp"
#include "support/encoder_fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/metric_oracles.hpp"
#include "support/parallel_oracle.hpp"
#include "support/task_fixtures.hpp"

namespace fs = std::filesystem;
using namespace clinlm;

namespace {

// Collects failed sub-checks; a criterion passes when none failed.
struct Verdict {
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream o;
  o << std::setprecision(precision) << v;
  return o.str();
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("clinlm-accept-" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// --- 1. gradients ----------------------------------------------------------------

Tensor<double> probe_sum(Tape<double>& tape, const Tensor<double>& y) {
  std::vector<double> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.3 + 0.71 * static_cast<double>(i));
  return ops::sum(tape, ops::mul(tape, y, Tensor<double>(y.shape(), w)));
}

void gradients(Verdict& v) {
  using clinlm::testing::random_tensor;
  double worst_op = 0.0, worst_model = 0.0;
  std::string worst_name;
  std::set<std::string> covered;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(1000 + seed);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 5}, rng);
    auto c3 = random_tensor({2, 3, 4}, rng);
    auto d3 = random_tensor({2, 4, 3}, rng);
    auto table = random_tensor({6, 4}, rng);
    auto gain = random_tensor({4}, rng);
    auto beta = random_tensor({4}, rng);
    auto target = random_tensor({3, 4}, rng);
    std::vector<std::int32_t> ids{2, 0, 5, 2, 1};
    std::vector<std::uint8_t> keep{1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 0};
    std::vector<std::int32_t> classes{1, 3, -1};
    std::vector<double> weights{0.5, 1.0, 2.0};
    Tensor<double> onehot(Shape{3, 4}, {0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0});

    auto check = [&](const std::string& name, std::vector<Tensor<double>> ps,
                     const std::function<Tensor<double>(Tape<double>&)>& f) {
      auto r = clinlm::testing::check_gradients(std::move(ps), f);
      covered.insert(name);
      if (r.max_rel_error > worst_op) {
        worst_op = r.max_rel_error;
        worst_name = name;
      }
      v.expect(r.max_rel_error < 1e-4, name + " seed " + std::to_string(seed) + " error " + fmt(r.max_rel_error));
    };
    check("matmul", {a, b}, [&](Tape<double>& t) { return probe_sum(t, ops::matmul(t, a, b)); });
    check("bmm", {c3, d3}, [&](Tape<double>& t) { return probe_sum(t, ops::bmm(t, c3, d3)); });
    check("transpose", {c3}, [&](Tape<double>& t) { return probe_sum(t, ops::transpose(t, c3)); });
    check("permute", {c3}, [&](Tape<double>& t) { return probe_sum(t, ops::permute(t, c3, {1, 2, 0})); });
    check("reshape", {c3}, [&](Tape<double>& t) { return probe_sum(t, ops::reshape(t, c3, {4, 6})); });
    check("add", {a, gain}, [&](Tape<double>& t) { return probe_sum(t, ops::add(t, a, gain)); });
    check("mul", {a, target}, [&](Tape<double>& t) { return probe_sum(t, ops::mul(t, a, target)); });
    check("scale", {a}, [&](Tape<double>& t) { return probe_sum(t, ops::scale(t, a, -0.6)); });
    check("concat", {a, table}, [&](Tape<double>& t) { return probe_sum(t, ops::concat(t, {a, table}, 0)); });
    check("slice", {c3}, [&](Tape<double>& t) { return probe_sum(t, ops::slice(t, c3, 1, 1, 3)); });
    check("embedding_lookup", {table},
          [&](Tape<double>& t) { return probe_sum(t, ops::embedding_lookup<double>(t, table, ids)); });
    check("gelu", {a}, [&](Tape<double>& t) { return probe_sum(t, ops::gelu(t, a)); });
    check("tanh", {a}, [&](Tape<double>& t) { return probe_sum(t, ops::tanh(t, a)); });
    check("layer_norm", {a, gain, beta},
          [&](Tape<double>& t) { return probe_sum(t, ops::layer_norm(t, a, gain, beta)); });
    check("softmax", {a}, [&](Tape<double>& t) { return probe_sum(t, ops::softmax(t, a)); });
    check("masked_fill", {a}, [&](Tape<double>& t) {
      return probe_sum(t, ops::softmax(t, ops::masked_fill<double>(t, a, keep, -1e9)));
    });
    check("dropout", {a}, [&](Tape<double>& t) {
      Rng mask(seed);  // same mask on every evaluation
      return probe_sum(t, ops::dropout(t, a, 0.3, mask));
    });
    check("sum", {a}, [&](Tape<double>& t) { return ops::sum(t, ops::mul(t, a, a)); });
    check("mean", {a}, [&](Tape<double>& t) { return ops::mean(t, ops::mul(t, a, a)); });
    check("mse", {a, target}, [&](Tape<double>& t) { return ops::mse(t, a, target); });
    check("cross_entropy", {a},
          [&](Tape<double>& t) { return ops::cross_entropy(t, ops::softmax(t, a), onehot); });
    check("softmax_cross_entropy", {a}, [&](Tape<double>& t) {
      return ops::softmax_cross_entropy<double>(t, a, classes, weights);
    });

    auto cfg = clinlm::testing::check_config();
    auto enc = model::build_encoder<double>(cfg, seed);
    Rng perturb(seed + 100);
    for (auto& p : enc.parameters())
      for (auto& x : p.data()) x += 0.3 * perturb.normal();
    clinlm::testing::EncoderProbe<double> probe(perturb, cfg, 2, 6);
    std::vector<Tensor<double>> checked;
    for (auto& [name, t] : enc.named_parameters()) {
      // The key bias shifts every score in a softmax row equally; its exact
      // gradient is zero and it is checked for that below.
      if (!name.ends_with("attn.k.bias")) checked.push_back(t);
    }
    auto r = clinlm::testing::check_gradients(checked, [&](Tape<double>& tape) { return probe.loss(enc, tape); });
    for (auto& [name, t] : enc.named_parameters()) {
      if (!name.ends_with("attn.k.bias")) continue;
      for (double g : t.grad()) v.expect(std::abs(g) < 1e-9, name + " gradient not zero");
    }
    worst_model = std::max(worst_model, r.max_rel_error);
    v.expect(r.max_rel_error < 1e-4, "encoder seed " + std::to_string(seed) + " error " + fmt(r.max_rel_error));
  }
  v.note(std::to_string(covered.size()) + " ops, worst " + fmt(worst_op) + " (" + worst_name + "); encoder L2 H16 A2 " +
         fmt(worst_model) + " over 5 seeds");
}

// --- 2. softmax and cross-entropy ------------------------------------------------------

void softmax_ce(Verdict& v) {
  Rng rng(77);
  Tape<double> off(false);
  Tape<float> offf(false);
  double worst_sum = 0.0, worst_ce = 0.0, worst_grad = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(60);
    const double spread = 0.1 + 20.0 * rng.uniform();
    std::vector<double> x(n);
    for (auto& e : x) e = spread * rng.normal();

    // Row sums, both precisions.
    auto p = ops::softmax(off, Tensor<double>(Shape{1, n}, x));
    std::vector<float> xf(x.begin(), x.end());
    auto pf = ops::softmax(offf, Tensor<float>(Shape{1, n}, xf));
    double s = 0.0, sf = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s += p.data()[i];
      sf += pf.data()[i];
    }
    worst_sum = std::max({worst_sum, std::abs(s - 1.0), std::abs(sf - 1.0)});

    // Cross-entropy against -sum t_i log P_i in long double on a random
    // distribution and one-hot target.
    std::vector<double> q(n);
    long double total = 0;
    for (auto& e : q) {
      e = 1e-6 + rng.uniform();
      total += e;
    }
    for (auto& e : q) e = static_cast<double>(e / total);
    const std::size_t c = rng.uniform_int(n);
    std::vector<double> t(n, 0.0);
    t[c] = 1.0;
    const double got = ops::cross_entropy(off, Tensor<double>(Shape{n}, q), Tensor<double>(Shape{n}, t)).item();
    long double direct = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (t[i] != 0.0) direct -= static_cast<long double>(t[i]) * std::log(static_cast<long double>(q[i]));
    worst_ce = std::max(worst_ce, std::abs(got - static_cast<double>(direct)));

    // Fused gradient against P - t.
    Tape<double> tape;
    Tensor<double> logits(Shape{1, n}, x, true);
    std::vector<std::int32_t> target{static_cast<std::int32_t>(c)};
    std::vector<double> w{1.0};
    tape.backward(ops::softmax_cross_entropy<double>(tape, logits, target, w));
    // Reference softmax in long double, independent of the library's.
    long double top = *std::max_element(x.begin(), x.end()), z = 0;
    for (double e : x) z += std::exp(static_cast<long double>(e) - top);
    for (std::size_t i = 0; i < n; ++i) {
      const long double ref = std::exp(static_cast<long double>(x[i]) - top) / z - t[i];
      worst_grad = std::max(worst_grad, static_cast<double>(std::abs(logits.grad()[i] - ref)));
    }
  }
  v.expect(worst_sum <= 1e-6, "softmax row sum off by " + fmt(worst_sum));
  v.expect(worst_ce <= 1e-10, "cross_entropy off by " + fmt(worst_ce));
  v.expect(worst_grad <= 1e-8, "fused gradient off by " + fmt(worst_grad));
  v.note("1000 vectors: |sum-1| " + fmt(worst_sum) + ", CE " + fmt(worst_ce) + ", grad " + fmt(worst_grad));
}

// --- 3. parallel equivalence -------------------------------------------------------------

model::ModelConfig grid_config() {
  model::ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 16;
  c.num_heads = 4;
  c.intermediate_size = 32;
  c.vocab_size = 24;
  c.max_seq_len = 8;
  c.dropout = 0.0;
  return c;
}

// Full-length rows and a per-row mean loss, so averaging replica gradients
// over equal halves gives the full-batch gradient.
struct GridBatch {
  static constexpr std::size_t kRows = 8, kSeq = 6;
  std::vector<std::vector<std::int32_t>> rows;
  std::vector<std::int32_t> sop;
  std::vector<std::vector<std::int32_t>> mlm_targets;  // per row, positions 1 and 4

  explicit GridBatch(Rng& rng) {
    for (std::size_t i = 0; i < kRows; ++i) {
      std::vector<std::int32_t> r(kSeq);
      for (auto& id : r) id = static_cast<std::int32_t>(rng.uniform_int(24));
      rows.push_back(r);
      sop.push_back(static_cast<std::int32_t>(rng.uniform_int(2)));
      mlm_targets.push_back({static_cast<std::int32_t>(rng.uniform_int(24)), static_cast<std::int32_t>(rng.uniform_int(24))});
    }
  }

  struct Out {
    std::vector<float> mlm, sop;
    Tensor<float> loss;
  };

  Out run(const model::Encoder<float>& enc, Tape<float>& tape, std::size_t begin, std::size_t end,
          model::ParallelHooks<float>* hooks) const {
    std::vector<std::vector<std::int32_t>> part(rows.begin() + begin, rows.begin() + end);
    auto out = model::forward(enc, tape, model::Batch::pack(part, 0), {}, hooks);
    const std::size_t n = end - begin;
    std::vector<std::int32_t> positions, targets, labels(sop.begin() + begin, sop.begin() + end);
    for (std::size_t i = 0; i < n; ++i) {
      positions.insert(positions.end(), {static_cast<std::int32_t>(i * kSeq + 1), static_cast<std::int32_t>(i * kSeq + 4)});
      targets.insert(targets.end(), mlm_targets[begin + i].begin(), mlm_targets[begin + i].end());
    }
    auto mlm = model::mlm_logits(enc, tape, out.hidden, positions);
    auto sl = model::sop_logits(enc, tape, out.pooled);
    std::vector<float> wm(targets.size(), 1.0f / static_cast<float>(targets.size()));
    std::vector<float> ws(n, 1.0f / static_cast<float>(n));
    auto loss = ops::add(tape,
                         ops::softmax_cross_entropy(tape, mlm, std::span<const std::int32_t>(targets),
                                                    std::span<const float>(wm)),
                         ops::softmax_cross_entropy(tape, sl, std::span<const std::int32_t>(labels),
                                                    std::span<const float>(ws)));
    loss = ops::add(tape, loss, ops::scale(tape, ops::mean(tape, out.hidden), 0.1f));
    return {{mlm.data().begin(), mlm.data().end()}, {sl.data().begin(), sl.data().end()}, loss};
  }
};

std::string dump_floats(std::span<const float> v) {
  return std::string(reinterpret_cast<const char*>(v.data()), v.size_bytes());
}

std::vector<float> load_floats(const fs::path& p) {
  auto s = read_file(p);
  std::vector<float> v(s.size() / sizeof(float));
  std::memcpy(v.data(), s.data(), s.size());
  return v;
}

std::string dump_encoder(const model::Encoder<float>& enc) {
  std::string out;
  for (const auto& [name, t] : enc.named_parameters()) out += dump_floats(t.data());
  return out;
}

void load_encoder(model::Encoder<float>& enc, const std::string& bytes) {
  std::size_t at = 0;
  for (auto& [name, t] : enc.named_parameters()) {
    auto d = t.data();
    if (at + d.size_bytes() > bytes.size()) throw ValueError("truncated gradient dump");
    std::memcpy(d.data(), bytes.data() + at, d.size_bytes());
    at += d.size_bytes();
  }
}

void parallel_grid(Verdict& v) {
  auto cfg = grid_config();
  auto full = model::build_encoder<float>(cfg, 31);
  Rng rng(31);
  for (auto& p : full.parameters())
    for (auto& x : p.data()) x += static_cast<float>(0.2 * rng.normal());
  GridBatch batch(rng);

  auto serial_model = full.clone();
  Tape<float> tape;
  auto serial = batch.run(serial_model, tape, 0, GridBatch::kRows, nullptr);
  tape.backward(serial.loss);
  auto serial_grads = parallel::gradient_view(serial_model);

  auto dir = scratch("grid");
  double worst_logit = 0.0, worst_grad = 0.0;
  std::size_t cells = 0;
  for (auto transport : {parallel::Transport::threads, parallel::Transport::processes}) {
    for (std::size_t p : {1, 2, 4}) {
      for (std::size_t r : {1, 2}) {
        const std::string cell = std::string(transport == parallel::Transport::threads ? "threads" : "sockets") +
                                 " P=" + std::to_string(p) + " R=" + std::to_string(r);
        auto plan = parallel::ShardPlan::make(cfg, p);
        auto shards = parallel::shard_model(full, plan);
        parallel::LaunchOptions opts;
        opts.model_parallel = p;
        opts.data_parallel = r;
        opts.transport = transport;
        opts.timeout = std::chrono::seconds(60);
        parallel::launch_workers(opts, [&](parallel::WorkerContext& w) {
          auto mine = shards[w.shard].clone();
          parallel::TensorParallelHooks<float> hooks(*w.model_group);
          const std::size_t per = GridBatch::kRows / r;
          Tape<float> t;
          w.model_group->clear_trace();
          auto out = batch.run(mine, t, w.replica * per, (w.replica + 1) * per, &hooks);
          t.backward(out.loss);
          std::map<std::pair<int, std::string>, int> counts;
          for (const auto& rec : w.model_group->trace()) counts[{rec.layer, rec.collective}]++;
          std::string trace;
          for (const auto& [key, n] : counts)
            trace += std::to_string(key.first) + " " + key.second + " " + std::to_string(n) + "\n";
          parallel::average_gradients(mine, *w.data_group);
          const auto tag = std::to_string(w.world_rank);
          write_file_atomic(dir / ("mlm" + tag), dump_floats(out.mlm));
          write_file_atomic(dir / ("sop" + tag), dump_floats(out.sop));
          write_file_atomic(dir / ("grad" + tag), dump_encoder(parallel::gradient_view(mine)));
          write_file_atomic(dir / ("trace" + tag), trace);
        });

        std::vector<float> mlm, sop;
        for (std::size_t rep = 0; rep < r; ++rep) {
          std::vector<model::Encoder<float>> grads;
          for (std::size_t s = 0; s < p; ++s) {
            const auto tag = std::to_string(rep * p + s);
            auto g = shards[s].clone();
            load_encoder(g, read_file(dir / ("grad" + tag)));
            grads.push_back(std::move(g));
            auto m = load_floats(dir / ("mlm" + tag)), o = load_floats(dir / ("sop" + tag));
            if (s == 0) {
              mlm.insert(mlm.end(), m.begin(), m.end());
              sop.insert(sop.end(), o.begin(), o.end());
            }
            std::string trace = read_file(dir / ("trace" + tag));
            if (p > 1) {
              std::string expected;
              for (int layer = 0; layer < static_cast<int>(cfg.num_layers); ++layer)
                expected += std::to_string(layer) + " all_reduce.backward 2\n" + std::to_string(layer) +
                            " all_reduce.forward 2\n";
              v.expect(trace == expected, cell + " trace:\n" + trace);
            } else {
              v.expect(trace.empty(), cell + " single worker issued collectives");
            }
          }
          std::string worst;
          double d = clinlm::testing::max_rel_diff(parallel::unshard(grads, plan), serial_grads, &worst);
          worst_grad = std::max(worst_grad, d);
          v.expect(d < 1e-5, cell + " replica " + std::to_string(rep) + " gradient " + worst + " " + fmt(d));
        }
        double dm = clinlm::testing::max_rel_diff<float>(mlm, serial.mlm), ds = clinlm::testing::max_rel_diff<float>(sop, serial.sop);
        worst_logit = std::max({worst_logit, dm, ds});
        v.expect(mlm.size() == serial.mlm.size() && dm < 1e-5, cell + " MLM logits " + fmt(dm));
        v.expect(sop.size() == serial.sop.size() && ds < 1e-5, cell + " SOP logits " + fmt(ds));
        ++cells;
      }
    }
  }
  v.note(std::to_string(cells) + " cells, logits " + fmt(worst_logit) + ", gradients " + fmt(worst_grad) +
         " relative; 2+2 all-reduces per layer for P>1");
}

// --- 4. pretraining ---------------------------------------------------------------------

void pretraining(Verdict& v) {
  auto docs = pretrain::synthetic_clinical_notes(17000, 4);
  std::vector<std::string> lines;
  for (const auto& d : docs)
    for (const auto& s : d.sentences) {
      std::string line;
      for (const auto& w : s) line += (line.empty() ? "" : " ") + w;
      lines.push_back(std::move(line));
    }
  auto vocab = bpe::train_bpe(lines, 2000);
  auto tokenized = pretrain::tokenize_documents(docs, vocab);
  std::size_t tokens = 0;
  for (const auto& d : tokenized)
    for (const auto& s : d.sentences) tokens += s.size();
  v.expect(tokens >= 1000000, "corpus has only " + std::to_string(tokens) + " tokens");
  auto split = pretrain::split_corpus(std::move(tokenized), 0.05);

  // Masking: every sampled row masks round(0.15 n) of its n maskable tokens.
  auto pairs = pretrain::sentence_pairs(split.train);
  std::size_t rows_checked = 0, bad_rows = 0;
  for (std::int64_t step = 1; step <= 50; ++step) {
    const std::size_t at = static_cast<std::size_t>(step) * 97 % (pairs.size() - 16);
    auto b = pretrain::make_batch(split.train, std::span(pairs).subspan(at, 16), vocab, 128, 0.15, false, 4, step, at);
    std::vector<std::size_t> masked(16, 0);
    for (auto pos : b.mlm_rows) ++masked[static_cast<std::size_t>(pos) / b.inputs.seq];
    for (std::size_t j = 0; j < 16; ++j) {
      std::size_t n = 0;
      for (std::size_t s = 0; s < b.inputs.seq; ++s) {
        auto id = b.inputs.ids[j * b.inputs.seq + s];
        if (b.inputs.mask[j * b.inputs.seq + s] && (!vocab.is_special(id) || id == vocab.mask_id())) ++n;
      }
      bad_rows += masked[j] != static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
      ++rows_checked;
    }
  }
  v.expect(bad_rows == 0, std::to_string(bad_rows) + " of " + std::to_string(rows_checked) + " rows masked wrongly");

  auto enc = model::build_encoder<float>(model::preset("tiny", vocab.size()), 4);
  pretrain::PretrainConfig pc;
  pc.batch = 16;
  pc.adam.lr = 2e-3;
  pc.adam.warmup_steps = 100;
  pc.eval_every = 100;
  pc.patience = 3;
  pc.min_delta = 0.01;
  pc.max_steps = 20000;
  pc.seed = 4;
  pc.wall_time = false;
  auto r = pretrain::pretrain(enc, split, vocab, pc);

  const double ln_v = std::log(static_cast<double>(vocab.size()));
  const double init_gap = std::abs(r.initial_val_mlm - ln_v) / ln_v;
  v.expect(init_gap < 0.10, "initial MLM loss " + fmt(r.initial_val_mlm) + " vs ln V " + fmt(ln_v));
  v.expect(r.best_val <= 0.6 * r.initial_val, "best " + fmt(r.best_val) + " vs initial " + fmt(r.initial_val));

  // Replay the patience rule on the logged validation losses.
  std::optional<std::int64_t> expected_stop;
  double best = std::numeric_limits<double>::infinity();
  std::int64_t since = 0, best_step = 0;
  for (const auto& row : r.log.rows) {
    if (row.split != "val") continue;
    if (row.loss < best - pc.min_delta) {
      best = row.loss;
      best_step = row.step;
      since = 0;
    } else if (++since >= pc.patience) {
      expected_stop = row.step;
      break;
    }
  }
  v.expect(r.stop_reason == "patience", "stopped by " + r.stop_reason);
  v.expect(expected_stop && *expected_stop == r.steps, "patience replay disagrees with the stop step");
  v.expect(best_step == r.best_step, "best step " + std::to_string(r.best_step) + " vs replay " + std::to_string(best_step));
  v.note(std::to_string(tokens) + " tokens, V=" + std::to_string(vocab.size()) + ", initial MLM " +
         fmt(r.initial_val_mlm) + " (ln V " + fmt(ln_v) + "), val " + fmt(r.initial_val) + " -> " + fmt(r.best_val) +
         " (" + fmt(r.best_val / r.initial_val, 2) + "x), stop at " + std::to_string(r.steps) + " by " + r.stop_reason +
         ", " + std::to_string(rows_checked) + " masked rows exact");
}

// --- 5. task heads ------------------------------------------------------------------------

void task_heads(Verdict& v) {
  ::testing::TaskData data;
  auto vocab = ::testing::task_vocab(data);
  auto enc = ::testing::task_encoder(vocab);
  tasks::FinetuneConfig cfg;
  cfg.qa = ::testing::small_windows();

  auto metric = [](const nlohmann::json& report, const char* name) { return report["metrics"][name].get<double>(); };
  auto ner = tasks::finetune_ner(enc, vocab, data.ner, cfg);
  double ner_f1 = metric(tasks::score_ner(data.ner, tasks::predict_ner(ner, vocab, data.ner)), "f1");
  auto re = tasks::finetune_re(enc, vocab, data.re, cfg);
  double re_f1 = metric(tasks::score_re(data.re, tasks::predict_re(re, vocab, data.re)), "f1");
  auto nli = tasks::finetune_nli(enc, vocab, data.nli, cfg);
  double nli_acc = metric(tasks::score_nli(data.nli, tasks::predict_nli(nli, vocab, data.nli)), "accuracy");
  auto qa = tasks::finetune_qa(enc, vocab, data.qa, cfg);
  double qa_em = metric(tasks::score_qa(data.qa, tasks::predict_qa(qa, vocab, data.qa)), "exact_match");
  auto sts_cfg = cfg;
  sts_cfg.epochs = 150;
  auto sts = tasks::finetune_sts(enc, vocab, data.sts, sts_cfg);
  double sts_r = metric(tasks::score_sts(data.sts, tasks::predict_sts(sts, vocab, data.sts)), "pearson");

  v.expect(ner_f1 >= 0.99, "NER F1 " + fmt(ner_f1));
  v.expect(re_f1 >= 0.99, "RE F1 " + fmt(re_f1));
  v.expect(sts_r >= 0.99, "STS Pearson " + fmt(sts_r));
  v.expect(nli_acc == 1.0, "NLI accuracy " + fmt(nli_acc));
  v.expect(qa_em >= 0.95, "QA EM " + fmt(qa_em));
  v.note("NER F1 " + fmt(ner_f1) + ", RE F1 " + fmt(re_f1) + ", STS r " + fmt(sts_r, 4) + ", NLI acc " +
         fmt(nli_acc) + ", QA EM " + fmt(qa_em));
}

// --- 6. windows ---------------------------------------------------------------------------

void windowing(Verdict& v) {
  Rng rng(66);
  std::size_t triples = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t len = 1 + rng.uniform_int(4000);
    const std::size_t window = trial % 10 == 0 ? 446 : 1 + rng.uniform_int(700);
    const std::size_t stride = trial % 10 == 0 ? 396 : 1 + rng.uniform_int(window);
    auto starts = tasks::window_starts(len, window, stride);
    std::vector<char> covered(len, 0);
    for (auto s : starts)
      for (std::size_t t = s; t < std::min(len, s + window); ++t) covered[t] = 1;
    const bool all = std::all_of(covered.begin(), covered.end(), [](char c) { return c; });
    v.expect(all, "uncovered token at len " + std::to_string(len));
    v.expect(!starts.empty() && starts.front() == 0, "first window not at 0");
    for (std::size_t k = 0; k + 1 < starts.size(); ++k) {
      const bool final_short = starts[k + 1] + window > len;
      if (!final_short && starts[k] + window - starts[k + 1] != window - stride)
        v.expect(false, "overlap wrong for (" + std::to_string(len) + ", " + std::to_string(window) + ", " +
                            std::to_string(stride) + ")");
    }
    ++triples;
  }
  auto s842 = tasks::window_starts(842, 446, 396);
  v.expect(s842 == std::vector<std::size_t>{0, 396}, "842-token starts");
  v.expect(s842.size() == 2 && 0 + 446 - s842[1] == 50, "842-token overlap is not 50");
  v.note(std::to_string(triples) + " triples covered; 842 tokens -> starts {0, 396}, overlap 50");
}

// --- 7. tokenizer -------------------------------------------------------------------------

void tokenizer(Verdict& v) {
  std::vector<std::string> corpus;
  for (const auto& d : pretrain::synthetic_clinical_notes(1200, 7))
    for (const auto& s : d.sentences) {
      std::string line;
      for (const auto& w : s) line += (line.empty() ? "" : " ") + w;
      corpus.push_back(line);
    }
  corpus.resize(std::min<std::size_t>(corpus.size(), 8000));
  Rng rng(7);
  const std::vector<std::string> pieces = {"mg", "  ", "\t", "é", "µg", "°C", "→", "±", "x", "12", "/", "\n", ";"};
  while (corpus.size() < 10000) {
    std::string line;
    for (std::size_t k = 0, n = 1 + rng.uniform_int(12); k < n; ++k) line += pieces[rng.uniform_int(pieces.size())];
    corpus.push_back(line);
  }
  corpus.resize(10000);

  const std::size_t V = 1200;
  auto a = bpe::train_bpe(corpus, V);
  auto b = bpe::train_bpe(corpus, V);
  auto c = bpe::train_bpe(corpus, V);
  v.expect(a.serialize() == b.serialize() && b.serialize() == c.serialize(), "vocabulary training differs across runs");

  std::size_t failures = 0;
  for (const auto& line : corpus) failures += a.decode(a.encode(line).ids) != line;
  v.expect(failures == 0, std::to_string(failures) + " round-trip failures");

  for (std::size_t vp : {a.size() / 2, a.size() / 4}) {
    auto small = bpe::train_bpe(corpus, vp);
    v.expect(a.truncated(vp).serialize() == small.serialize(), "truncation to " + std::to_string(vp));
    const auto& big_m = a.merges();
    const auto& small_m = small.merges();
    v.expect(small_m.size() <= big_m.size() && std::equal(small_m.begin(), small_m.end(), big_m.begin()),
             "merges of V'=" + std::to_string(vp) + " are not a prefix");
  }
  v.note("10000 lines, " + std::to_string(failures) + " round-trip failures; V=" +
         std::to_string(a.size()) + " identical over 3 runs; prefixes at V/2 and V/4");
}

// --- 8. de-identification -------------------------------------------------------------------

void deidentification(Verdict& v) {
  auto docs = corpus::synthetic_phi_corpus(300, 2026);
  auto rules = corpus::RuleSet::builtin();
  std::map<std::string, corpus::CategoryRecall> agg;
  std::size_t spans = 0, not_fixed = 0;
  for (const auto& d : docs) {
    auto r = corpus::deidentify(d.doc.text, rules);
    for (const auto& [cat, c] : corpus::phi_recall(d.gold, r.spans)) {
      agg[cat].gold += c.gold;
      agg[cat].found += c.found;
    }
    spans += d.gold.size();
    not_fixed += corpus::deidentify(r.text, rules).text != r.text;
  }
  v.expect(spans >= 500, "only " + std::to_string(spans) + " injected spans");
  v.expect(not_fixed == 0, std::to_string(not_fixed) + " documents change on a second pass");
  double lowest = 1.0;
  std::string lowest_cat;
  for (const auto& [cat, c] : agg) {
    if (c.recall() < lowest) {
      lowest = c.recall();
      lowest_cat = cat;
    }
    v.expect(c.recall() >= 0.95, cat + " recall " + fmt(c.recall()));
  }
  v.note(std::to_string(spans) + " spans over " + std::to_string(agg.size()) + " categories, lowest recall " +
         fmt(lowest) + (lowest < 1.0 ? " (" + lowest_cat + ")" : "") + ", fixed point on all documents");
}

// --- 9. metrics ---------------------------------------------------------------------------

void metric_oracles(Verdict& v) {
  Rng rng(909);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    auto g = clinlm::testing::random_spans(rng, 8), p = clinlm::testing::random_spans(rng, 8);
    auto lib = metrics::span_prf(g, p).overall;
    auto ora = clinlm::testing::oracle_prf(g, p);
    worst = std::max({worst, std::abs(lib.precision - ora.p), std::abs(lib.recall - ora.r), std::abs(lib.f1 - ora.f)});

    const std::size_t n = 2 + rng.uniform_int(30);
    std::vector<double> x, y;
    for (std::size_t k = 0; k < n; ++k) {
      x.push_back(rng.normal());
      y.push_back(rng.normal() - 0.7 * x.back());
    }
    worst = std::max(worst, std::abs(metrics::pearson(x, y) - clinlm::testing::oracle_pearson(x, y)));

    std::vector<int> la, lb;
    for (std::size_t k = 0; k < n; ++k) {
      la.push_back(static_cast<int>(rng.uniform_int(4)));
      lb.push_back(static_cast<int>(rng.uniform_int(4)));
    }
    worst = std::max(worst, std::abs(metrics::accuracy(la, lb) - clinlm::testing::oracle_accuracy(la, lb)));

    std::vector<std::string> golds;
    for (std::size_t k = 0, m = 1 + rng.uniform_int(3); k < m; ++k) golds.push_back(clinlm::testing::random_answer(rng));
    auto pred = clinlm::testing::random_answer(rng);
    auto q = metrics::qa_em_f1(golds, pred);
    auto [em, f1] = clinlm::testing::oracle_qa(golds, pred);
    worst = std::max({worst, std::abs(q.exact_match - em), std::abs(q.f1 - f1)});
  }
  v.expect(worst <= 1e-12, "largest difference " + fmt(worst));
  v.note("100 cases per metric, largest difference " + fmt(worst));
}

// --- 10. presets --------------------------------------------------------------------------

void presets(Verdict& v) {
  const std::pair<const char*, double> targets[] = {{"base", 345e6}, {"medium", 3.9e9}, {"large", 8.9e9}};
  std::string counts;
  for (auto [name, target] : targets) {
    const double n = static_cast<double>(model::count_params(model::preset(name, 50000)));
    const double gap = (n - target) / target;
    v.expect(std::abs(gap) <= 0.10, std::string(name) + " has " + fmt(n, 4));
    counts += std::string(counts.empty() ? "" : ", ") + name + " " + fmt(n / 1e6, 4) + "M (" +
              (gap >= 0 ? "+" : "") + fmt(100 * gap, 2) + "%)";
  }
  Rng rng(10);
  for (int i = 0; i < 25; ++i) {
    model::ModelConfig c;
    c.num_heads = 1 + rng.uniform_int(4);
    c.hidden_size = c.num_heads * (1 + rng.uniform_int(4));
    c.num_layers = 1 + rng.uniform_int(3);
    c.intermediate_size = rng.bernoulli(0.5) ? 0 : 1 + rng.uniform_int(24);
    c.vocab_size = 5 + rng.uniform_int(40);
    c.max_seq_len = 2 + rng.uniform_int(12);
    auto enc = model::build_encoder<float>(c, i);
    std::uint64_t all = 0;
    for (const auto& t : enc.parameters()) all += t.numel();
    v.expect(model::count_params(c) == enc.body_size(), "body count for config " + std::to_string(i));
    v.expect(model::count_params(c, true) == all, "full count for config " + std::to_string(i));
  }
  v.note(counts + "; closed form equals enumeration on 25 small configs");
}

// --- 11. reproducibility ----------------------------------------------------------------------

void reproducibility(Verdict& v) {
  auto dir = scratch("repro");
  auto run = [&](std::vector<std::string> args) {
    std::ostringstream out, err;
    int code = cli::run(args, out, err);
    if (code != 0) throw ValueError(args[0] + " failed: " + err.str());
  };
  run({"gen-fixtures", "--out", (dir / "fx").string(), "--docs", "200", "--phi-docs", "10"});
  run({"preprocess", "--input", (dir / "fx/notes.jsonl").string(), "--out", (dir / "pre").string()});
  run({"train-tokenizer", "--corpus", (dir / "pre/clean.jsonl").string(), "--vocab-size", "500", "--out",
       (dir / "tok").string()});
  const std::vector<std::string> args = {"pretrain", "--corpus", (dir / "pre/clean.jsonl").string(), "--vocab",
                                         (dir / "tok/vocab.txt").string(), "--out", (dir / "pt").string(),
                                         "--max-steps", "40", "--eval-every", "10", "--seed", "11"};
  run(args);
  const auto ckpt = read_file(dir / "pt/checkpoint.ckpt"), log = read_file(dir / "pt/train_log.csv"),
             manifest = read_file(dir / "pt/manifest.json");
  fs::remove_all(dir / "pt");
  run(args);
  v.expect(read_file(dir / "pt/manifest.json") == manifest, "manifests differ");
  v.expect(read_file(dir / "pt/checkpoint.ckpt") == ckpt, "checkpoints differ");
  v.expect(read_file(dir / "pt/train_log.csv") == log, "training logs differ");
  v.note("two CLI pretraining runs: checkpoint (" + std::to_string(ckpt.size()) + " bytes), log and manifest identical");
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0 when the criterion sets no runtime limit
  std::function<void(Verdict&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "gradient correctness", 60, gradients},
      {2, "softmax and cross-entropy", 0, softmax_ce},
      {3, "parallel equivalence", 300, parallel_grid},
      {4, "pretraining sanity", 600, pretraining},
      {5, "task-head trainability", 600, task_heads},
      {6, "windowing arithmetic", 0, windowing},
      {7, "tokenizer", 0, tokenizer},
      {8, "de-identification", 0, deidentification},
      {9, "metric oracles", 0, metric_oracles},
      {10, "config presets", 0, presets},
      {11, "reproducibility", 0, reproducibility},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(v);
    } catch (const std::exception& e) {
      v.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && secs > c.budget_s)
      v.failures.push_back("took " + fmt(secs) + " s, budget " + fmt(c.budget_s) + " s");
    const bool ok = v.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << std::setw(2) << c.id << " " << c.name << ": ";
    for (std::size_t i = 0; i < v.notes.size(); ++i) std::cout << (i ? "; " : "") << v.notes[i];
    std::cout << " [" << std::fixed << std::setprecision(1) << secs << " s]" << std::defaultfloat << "\n";
    for (std::size_t i = 0; i < v.failures.size() && i < 10; ++i) std::cout << "    " << v.failures[i] << "\n";
    std::cout.flush();
  }
  fs::remove_all(fs::temp_directory_path() / ("clinlm-accept-" + std::to_string(::getpid())));
  return failed == 0 ? 0 : 1;
}

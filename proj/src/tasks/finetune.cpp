// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/tasks/finetune.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>

#include "clinlm/common/error.hpp"
#include "clinlm/common/io.hpp"
#include "clinlm/model/checkpoint.hpp"
#include "clinlm/tensor/ops.hpp"

namespace clinlm::tasks {

using nlohmann::json;
using model::Batch;
using model::Encoder;
using model::Linear;
using namespace ops;

namespace {

constexpr std::int32_t kIgnore = -100;
constexpr float kMasked = -1e9F;

const std::map<Task, std::string_view>& task_names() {
  static const std::map<Task, std::string_view> names{
      {Task::kNer, "ner"}, {Task::kRe, "re"}, {Task::kSts, "sts"}, {Task::kNli, "nli"}, {Task::kQa, "qa"}};
  return names;
}

}  // namespace

std::string_view task_name(Task task) { return task_names().at(task); }

Task parse_task(std::string_view name) {
  for (const auto& [task, n] : task_names()) {
    if (n == name) return task;
  }
  throw ConfigError("unknown task '" + std::string(name) + "' (expected ner, re, sts, nli or qa)");
}

json FinetuneConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch", batch},
          {"lr", adam.lr},
          {"warmup_steps", adam.warmup_steps},
          {"seed", seed},
          {"max_seq_len", max_seq_len},
          {"ner_mode", ner_mode == NerMode::kUnified ? "unified" : "per-category"},
          {"qa",
           {{"max_question", qa.max_question},
            {"window", qa.window},
            {"stride", qa.stride},
            {"max_answer", qa.max_answer},
            {"budget",
             "1 + question + 1 + window + 1 <= max_seq_len; an oversized window shrinks to fit and the stride "
             "shrinks by the same amount"}}}};
}

std::vector<Tensor<float>> TaskModel::parameters() const {
  auto params = encoder.parameters();
  params.push_back(head.weight);
  params.push_back(head.bias);
  return params;
}

// --- input packing -----------------------------------------------------------

Packed pack_pair(const bpe::Vocabulary& vocab, std::string_view a, std::string_view b, std::size_t max_len) {
  if (max_len < 5) throw ConfigError("a packed pair needs max_len >= 5, got " + std::to_string(max_len));
  auto ia = vocab.encode(a).ids;
  auto ib = vocab.encode(b).ids;
  while (ia.size() + ib.size() + 3 > max_len) {
    (ia.size() >= ib.size() ? ia : ib).pop_back();
  }
  Packed p;
  p.ids.push_back(vocab.cls_id());
  p.ids.insert(p.ids.end(), ia.begin(), ia.end());
  p.ids.push_back(vocab.sep_id());
  p.segments.assign(p.ids.size(), 0);
  p.ids.insert(p.ids.end(), ib.begin(), ib.end());
  p.ids.push_back(vocab.sep_id());
  p.segments.resize(p.ids.size(), 1);
  return p;
}

NerInput pack_ner(const bpe::Vocabulary& vocab, std::span<const std::string> tokens, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("NER inputs need max_len >= 3");
  NerInput in;
  in.packed.ids.push_back(vocab.cls_id());
  for (const auto& word : tokens) {
    auto ids = vocab.encode_word(word);
    if (ids.empty() || in.packed.ids.size() + ids.size() + 1 > max_len) break;
    in.word_starts.push_back(in.packed.ids.size());
    in.packed.ids.insert(in.packed.ids.end(), ids.begin(), ids.end());
  }
  in.packed.ids.push_back(vocab.sep_id());
  in.packed.segments.assign(in.packed.ids.size(), 0);
  return in;
}

MarkerPositions find_markers(const bpe::Vocabulary& vocab, std::span<const std::int32_t> ids) {
  auto locate = [&](std::string_view marker) {
    std::int32_t id = vocab.id(marker);
    auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) throw ValueError("packed relation input has no " + std::string(marker) + " marker");
    return static_cast<std::size_t>(it - ids.begin());
  };
  return {locate(kS1), locate(kE1), locate(kS2), locate(kE2)};
}

Packed pack_relation(const bpe::Vocabulary& vocab, const ReExample& e, std::size_t max_len) {
  MarkedPair m = mark_entities(e.s1, e.c1, e.s2, e.c2);
  return pack_pair(vocab, m.s1, m.s2, max_len);
}

// --- shared training machinery -----------------------------------------------

namespace {

struct Instance {
  Packed packed;
  std::vector<std::int32_t> token_targets;  // ner: one per packed position
  std::int32_t label = 0;                   // re, nli
  double score = 0.0;                       // sts
  MarkerPositions markers{};                // re
  std::vector<std::uint8_t> allowed;        // qa: positions a span may use
  std::int32_t start = 0, end = 0;          // qa
};

Instance from_packed(Packed p) {
  Instance inst;
  inst.packed = std::move(p);
  return inst;
}

using LossFn = std::function<Tensor<float>(const TaskModel&, Tape<float>&, const std::vector<const Instance*>&,
                                           const Batch&, const model::EncoderOutput<float>&)>;

std::size_t resolve_max_len(const model::ModelConfig& cfg, std::size_t requested) {
  if (requested == 0) return cfg.max_seq_len;
  if (requested > cfg.max_seq_len) {
    throw ConfigError("max_seq_len " + std::to_string(requested) + " exceeds the encoder's " +
                      std::to_string(cfg.max_seq_len));
  }
  return requested;
}

TaskModel make_model(const Encoder<float>& encoder, std::size_t in, std::size_t out, std::vector<std::string> labels,
                     std::uint64_t seed) {
  TaskModel m;
  m.encoder = encoder.clone();
  Rng rng(seed ^ 0x68656164ULL);
  std::vector<float> w(in * out);
  for (auto& x : w) x = static_cast<float>(rng.truncated_normal(0.02));
  m.head.weight = Tensor<float>({in, out}, std::move(w), true);
  m.head.bias = Tensor<float>::zeros({out}, true);
  m.labels = std::move(labels);
  return m;
}

Batch pack_batch(const std::vector<const Instance*>& rows, std::int32_t pad) {
  std::vector<std::vector<std::int32_t>> ids, segs;
  for (const auto* r : rows) {
    ids.push_back(r->packed.ids);
    segs.push_back(r->packed.segments);
  }
  return Batch::pack(ids, pad, segs);
}

void train(TaskModel& m, const std::vector<Instance>& data, const FinetuneConfig& cfg, std::int32_t pad,
           const LossFn& loss_fn, std::vector<double>& epoch_losses) {
  if (data.empty()) throw ValueError("fine-tuning needs at least one example");
  if (cfg.batch == 0 || cfg.epochs == 0) throw ConfigError("fine-tuning needs batch > 0 and epochs > 0");
  auto params = m.parameters();
  AdamState<float> state;
  std::int64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(cfg.seed).fork(0x65706f6368ULL + epoch).shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
      if (cfg.stop && cfg.stop->load()) return;
      std::vector<const Instance*> rows;
      for (std::size_t i = first; i < std::min(order.size(), first + cfg.batch); ++i) rows.push_back(&data[order[i]]);
      Batch batch = pack_batch(rows, pad);
      Tape<float> tape;
      Rng drop = Rng(cfg.seed ^ 0x64726f70ULL).fork(static_cast<std::uint64_t>(step));
      model::ForwardOptions opts;
      if (m.encoder.cfg.dropout > 0.0) {
        opts.train = true;
        opts.rng = &drop;
      }
      auto out = model::forward(m.encoder, tape, batch, opts);
      Tensor<float> loss = loss_fn(m, tape, rows, batch, out);
      double value = loss.data()[0];
      if (!std::isfinite(value)) {
        throw NumericError("non-finite fine-tuning loss at step " + std::to_string(step + 1));
      }
      tape.backward(loss);
      adam_step(params, state, cfg.adam);
      for (auto& p : params) p.zero_grad();
      total += value;
      ++batches;
      ++step;
    }
    epoch_losses.push_back(total / static_cast<double>(batches));
    if (cfg.on_epoch) cfg.on_epoch(epoch + 1, epoch_losses.back());
  }
}

std::vector<double> softmax_row(std::span<const float> logits) {
  double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - top);
  for (auto& x : p) x /= z;
  return p;
}

std::int32_t label_index(const std::vector<std::string>& labels, const std::string& label) {
  auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw SchemaError("label '" + label + "' is not in the label set");
  return static_cast<std::int32_t>(it - labels.begin());
}

// Runs `fn` over inference batches of instances without recording a tape.
template <typename Fn>
void for_each_batch(const TaskModel& m, const std::vector<Instance>& data, std::int32_t pad, Fn&& fn) {
  constexpr std::size_t kBatch = 16;
  for (std::size_t first = 0; first < data.size(); first += kBatch) {
    std::vector<const Instance*> rows;
    for (std::size_t i = first; i < std::min(data.size(), first + kBatch); ++i) rows.push_back(&data[i]);
    Batch batch = pack_batch(rows, pad);
    Tape<float> tape(false);
    auto out = model::forward(m.encoder, tape, batch);
    fn(first, rows, batch, out, tape);
  }
}

// --- per-task heads ------------------------------------------------------------

Tensor<float> ner_loss_fn(const TaskModel& m, Tape<float>& tape, const std::vector<const Instance*>& rows,
                       const Batch& batch, const model::EncoderOutput<float>& out) {
  Tensor<float> logits = model::linear(tape, out.hidden, m.head);
  std::vector<std::int32_t> targets(batch.batch * batch.seq, kIgnore);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& t = rows[r]->token_targets;
    std::copy(t.begin(), t.end(), targets.begin() + static_cast<std::ptrdiff_t>(r * batch.seq));
  }
  std::vector<float> weights(targets.size(), 1.0F);
  return softmax_cross_entropy<float>(tape, logits, targets, weights);
}

Tensor<float> re_features(const TaskModel& m, Tape<float>& tape, const std::vector<const Instance*>& rows,
                          const Batch& batch, const Tensor<float>& hidden) {
  (void)m;
  std::vector<Tensor<float>> parts;
  for (int k = 0; k < 5; ++k) {
    std::vector<std::int32_t> idx;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& mk = rows[r]->markers;
      std::size_t pos = k == 0 ? 0 : k == 1 ? mk.s1 : k == 2 ? mk.e1 : k == 3 ? mk.s2 : mk.e2;
      idx.push_back(static_cast<std::int32_t>(r * batch.seq + pos));
    }
    parts.push_back(embedding_lookup<float>(tape, hidden, idx));
  }
  return concat(tape, parts, 1);
}

Tensor<float> class_loss(Tape<float>& tape, const Tensor<float>& logits, const std::vector<const Instance*>& rows) {
  std::vector<std::int32_t> targets;
  for (const auto* r : rows) targets.push_back(r->label);
  std::vector<float> weights(rows.size(), 1.0F / static_cast<float>(rows.size()));
  return softmax_cross_entropy<float>(tape, logits, targets, weights);
}

Tensor<float> re_loss(const TaskModel& m, Tape<float>& tape, const std::vector<const Instance*>& rows,
                      const Batch& batch, const model::EncoderOutput<float>& out) {
  return class_loss(tape, model::linear(tape, re_features(m, tape, rows, batch, out.hidden), m.head), rows);
}

Tensor<float> pooled_loss(const TaskModel& m, Tape<float>& tape, const std::vector<const Instance*>& rows,
                          const Batch&, const model::EncoderOutput<float>& out) {
  return class_loss(tape, model::linear(tape, out.pooled, m.head), rows);
}

Tensor<float> sts_loss(const TaskModel& m, Tape<float>& tape, const std::vector<const Instance*>& rows,
                       const Batch&, const model::EncoderOutput<float>& out) {
  std::vector<float> target;
  for (const auto* r : rows) target.push_back(static_cast<float>(r->score));
  Tensor<float> t({rows.size(), 1}, std::move(target));
  return mse(tape, model::linear(tape, out.pooled, m.head), t);
}

// Start and end logits as two [batch, seq] tensors, with disallowed positions
// pushed to kMasked.
std::pair<Tensor<float>, Tensor<float>> qa_logits(const TaskModel& m, Tape<float>& tape,
                                                  const std::vector<const Instance*>& rows, const Batch& batch,
                                                  const Tensor<float>& hidden) {
  Tensor<float> logits = model::linear(tape, hidden, m.head);
  std::vector<std::uint8_t> keep(batch.batch * batch.seq, 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& a = rows[r]->allowed;
    std::copy(a.begin(), a.end(), keep.begin() + static_cast<std::ptrdiff_t>(r * batch.seq));
  }
  auto side = [&](std::size_t col) {
    Tensor<float> s = reshape(tape, slice(tape, logits, 1, col, col + 1), {batch.batch, batch.seq});
    return masked_fill<float>(tape, s, keep, kMasked);
  };
  return {side(0), side(1)};
}

Tensor<float> qa_loss(const TaskModel& m, Tape<float>& tape, const std::vector<const Instance*>& rows,
                      const Batch& batch, const model::EncoderOutput<float>& out) {
  auto [start, end] = qa_logits(m, tape, rows, batch, out.hidden);
  std::vector<std::int32_t> ts, te;
  for (const auto* r : rows) {
    ts.push_back(r->start);
    te.push_back(r->end);
  }
  std::vector<float> w(rows.size(), 0.5F / static_cast<float>(rows.size()));
  return add(tape, softmax_cross_entropy<float>(tape, start, ts, w), softmax_cross_entropy<float>(tape, end, te, w));
}

// --- instance builders -----------------------------------------------------------

std::vector<Instance> ner_instances(const bpe::Vocabulary& vocab, std::span<const NerExample> data,
                                    const std::vector<std::string>& labels, const std::string& only_category,
                                    std::size_t max_len) {
  std::vector<Instance> out;
  for (const auto& e : data) {
    NerInput in = pack_ner(vocab, e.tokens, max_len);
    Instance inst;
    inst.token_targets.assign(in.packed.ids.size(), kIgnore);
    for (std::size_t w = 0; w < in.word_starts.size(); ++w) {
      std::string label = e.labels[w];
      if (!only_category.empty() && label != "O" && label.substr(2) != only_category) label = "O";
      inst.token_targets[in.word_starts[w]] = label_index(labels, label);
    }
    inst.packed = std::move(in.packed);
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<Instance> re_instances(const bpe::Vocabulary& vocab, std::span<const ReExample> data,
                                   const std::vector<std::string>* labels, std::size_t max_len) {
  std::vector<Instance> out;
  for (const auto& e : data) {
    Instance inst;
    inst.packed = pack_relation(vocab, e, max_len);
    inst.markers = find_markers(vocab, inst.packed.ids);
    if (labels) inst.label = label_index(*labels, e.label);
    out.push_back(std::move(inst));
  }
  return out;
}

struct QaContext {
  bpe::Encoding context;
  std::vector<std::int32_t> question;
  std::vector<QaWindow> windows;
};

QaContext qa_context(const bpe::Vocabulary& vocab, const QaExample& e, const QaWindowing& w, std::size_t max_len) {
  QaContext c;
  c.context = vocab.encode(e.context);
  c.question = vocab.encode(e.question).ids;
  c.windows = qa_windows(c.question, c.context.ids, w, max_len, vocab.cls_id(), vocab.sep_id());
  return c;
}

Instance qa_instance(const QaWindow& win) {
  Instance inst;
  inst.packed = {win.ids, win.segments};
  inst.allowed.assign(win.ids.size(), 0);
  inst.allowed[0] = 1;
  for (std::size_t p = 0; p < win.length; ++p) inst.allowed[win.context_offset + p] = 1;
  return inst;
}

// Token span covering the answer bytes, if any token overlaps them.
std::optional<std::pair<std::size_t, std::size_t>> answer_tokens(const bpe::Encoding& enc, const QaAnswer& a) {
  std::size_t a_end = a.start + a.text.size();
  std::optional<std::size_t> first, last;
  for (std::size_t i = 0; i < enc.offsets.size(); ++i) {
    if (enc.offsets[i].second > a.start && enc.offsets[i].first < a_end) {
      if (!first) first = i;
      last = i;
    }
  }
  if (!first) return std::nullopt;
  return std::make_pair(*first, *last);
}

std::vector<Instance> qa_instances(const bpe::Vocabulary& vocab, std::span<const QaExample> data,
                                   const QaWindowing& w, std::size_t max_len) {
  std::vector<Instance> out;
  for (const auto& e : data) {
    QaContext c = qa_context(vocab, e, w, max_len);
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& a : e.answers) {
      if (auto s = answer_tokens(c.context, a)) spans.push_back(*s);
    }
    for (const auto& win : c.windows) {
      Instance inst = qa_instance(win);
      for (auto [s, t] : spans) {
        if (s >= win.start && t < win.start + win.length) {
          inst.start = static_cast<std::int32_t>(win.context_offset + s - win.start);
          inst.end = static_cast<std::int32_t>(win.context_offset + t - win.start);
          break;
        }
      }
      out.push_back(std::move(inst));
    }
  }
  return out;
}

std::vector<std::string> ner_categories(std::span<const NerExample> data) {
  std::set<std::string> cats;
  for (const auto& e : data) {
    for (const auto& l : e.labels) {
      if (l != "O") cats.insert(l.substr(2));
    }
  }
  return {cats.begin(), cats.end()};
}

FineTuned base(Task task, const Encoder<float>& encoder, const FinetuneConfig& cfg) {
  FineTuned ft;
  ft.task = task;
  ft.max_seq_len = resolve_max_len(encoder.cfg, cfg.max_seq_len);
  ft.qa = cfg.qa;
  return ft;
}

void require_task(const FineTuned& ft, Task task) {
  if (ft.task != task) {
    throw ConfigError("model was fine-tuned for " + std::string(task_name(ft.task)) + ", not " +
                      std::string(task_name(task)));
  }
}

}  // namespace

// --- fine-tuning entry points --------------------------------------------------

FineTuned finetune_ner(const Encoder<float>& encoder, const bpe::Vocabulary& vocab, std::span<const NerExample> data,
                       const FinetuneConfig& cfg) {
  FineTuned ft = base(Task::kNer, encoder, cfg);
  ft.ner_mode = cfg.ner_mode;
  auto cats = ner_categories(data);
  std::size_t h = encoder.cfg.hidden_size;
  if (cfg.ner_mode == NerMode::kUnified) {
    auto labels = bio_label_set(cats);
    TaskModel m = make_model(encoder, h, labels.size(), labels, cfg.seed);
    train(m, ner_instances(vocab, data, labels, "", ft.max_seq_len), cfg, vocab.pad_id(), ner_loss_fn, ft.epoch_losses);
    ft.models.push_back(std::move(m));
  } else {
    ft.categories = cats;
    for (std::size_t c = 0; c < cats.size(); ++c) {
      auto labels = bio_label_set({cats[c]});
      TaskModel m = make_model(encoder, h, labels.size(), labels, cfg.seed + c);
      train(m, ner_instances(vocab, data, labels, cats[c], ft.max_seq_len), cfg, vocab.pad_id(), ner_loss_fn,
            ft.epoch_losses);
      ft.models.push_back(std::move(m));
    }
  }
  return ft;
}

FineTuned finetune_re(const Encoder<float>& encoder, const bpe::Vocabulary& vocab, std::span<const ReExample> data,
                      const FinetuneConfig& cfg) {
  FineTuned ft = base(Task::kRe, encoder, cfg);
  std::set<std::string> labels{kNoRelation};
  for (const auto& e : data) labels.insert(e.label);
  std::vector<std::string> ordered(labels.begin(), labels.end());
  TaskModel m = make_model(encoder, 5 * encoder.cfg.hidden_size, ordered.size(), ordered, cfg.seed);
  train(m, re_instances(vocab, data, &m.labels, ft.max_seq_len), cfg, vocab.pad_id(), re_loss, ft.epoch_losses);
  ft.models.push_back(std::move(m));
  return ft;
}

FineTuned finetune_sts(const Encoder<float>& encoder, const bpe::Vocabulary& vocab, std::span<const StsExample> data,
                       const FinetuneConfig& cfg) {
  FineTuned ft = base(Task::kSts, encoder, cfg);
  TaskModel m = make_model(encoder, encoder.cfg.hidden_size, 1, {}, cfg.seed);
  std::vector<Instance> inst;
  for (const auto& e : data) {
    Instance i;
    i.packed = pack_pair(vocab, e.a, e.b, ft.max_seq_len);
    i.score = e.score;
    inst.push_back(std::move(i));
  }
  train(m, inst, cfg, vocab.pad_id(), sts_loss, ft.epoch_losses);
  ft.models.push_back(std::move(m));
  return ft;
}

FineTuned finetune_nli(const Encoder<float>& encoder, const bpe::Vocabulary& vocab, std::span<const NliExample> data,
                       const FinetuneConfig& cfg) {
  FineTuned ft = base(Task::kNli, encoder, cfg);
  TaskModel m = make_model(encoder, encoder.cfg.hidden_size, nli_labels().size(), nli_labels(), cfg.seed);
  std::vector<Instance> inst;
  for (const auto& e : data) {
    Instance i;
    i.packed = pack_pair(vocab, e.hypothesis, e.premise, ft.max_seq_len);
    i.label = label_index(m.labels, e.label);
    inst.push_back(std::move(i));
  }
  train(m, inst, cfg, vocab.pad_id(), pooled_loss, ft.epoch_losses);
  ft.models.push_back(std::move(m));
  return ft;
}

FineTuned finetune_qa(const Encoder<float>& encoder, const bpe::Vocabulary& vocab, std::span<const QaExample> data,
                      const FinetuneConfig& cfg) {
  FineTuned ft = base(Task::kQa, encoder, cfg);
  TaskModel m = make_model(encoder, encoder.cfg.hidden_size, 2, {}, cfg.seed);
  train(m, qa_instances(vocab, data, ft.qa, ft.max_seq_len), cfg, vocab.pad_id(), qa_loss, ft.epoch_losses);
  ft.models.push_back(std::move(m));
  return ft;
}

// --- inference -----------------------------------------------------------------

std::vector<std::vector<metrics::Span>> predict_ner(const FineTuned& ft, const bpe::Vocabulary& vocab,
                                                    std::span<const NerExample> data) {
  require_task(ft, Task::kNer);
  std::vector<std::vector<metrics::Span>> out(data.size());
  std::vector<NerInput> inputs;
  std::vector<Instance> inst;
  for (const auto& e : data) {
    inputs.push_back(pack_ner(vocab, e.tokens, ft.max_seq_len));
    inst.push_back(from_packed(inputs.back().packed));
  }
  for (const auto& m : ft.models) {
    for_each_batch(m, inst, vocab.pad_id(), [&](std::size_t first, const auto& rows, const Batch& batch,
                                                const auto& enc_out, Tape<float>& tape) {
      Tensor<float> logits = model::linear(tape, enc_out.hidden, m.head);
      std::size_t n = m.labels.size();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& in = inputs[first + r];
        std::vector<std::string> tags(data[first + r].tokens.size(), "O");
        for (std::size_t w = 0; w < in.word_starts.size(); ++w) {
          auto row = logits.data().subspan((r * batch.seq + in.word_starts[w]) * n, n);
          tags[w] = m.labels[static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())];
        }
        for (auto& s : bio_decode(tags)) out[first + r].push_back(std::move(s));
      }
    });
  }
  for (auto& spans : out) {
    std::sort(spans.begin(), spans.end());
    spans.erase(std::unique(spans.begin(), spans.end()), spans.end());
  }
  return out;
}

namespace {

std::vector<ClassPrediction> classify(const TaskModel& m, const std::vector<Instance>& inst, std::int32_t pad,
                                      bool relation) {
  std::vector<ClassPrediction> out;
  for_each_batch(m, inst, pad, [&](std::size_t, const auto& rows, const Batch& batch, const auto& enc_out,
                                   Tape<float>& tape) {
    Tensor<float> x = relation ? re_features(m, tape, rows, batch, enc_out.hidden) : enc_out.pooled;
    Tensor<float> logits = model::linear(tape, x, m.head);
    std::size_t n = m.labels.size();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto p = softmax_row(logits.data().subspan(r * n, n));
      std::size_t best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
      out.push_back({m.labels[best], std::move(p)});
    }
  });
  return out;
}

}  // namespace

std::vector<ClassPrediction> predict_re(const FineTuned& ft, const bpe::Vocabulary& vocab,
                                        std::span<const ReExample> data) {
  require_task(ft, Task::kRe);
  return classify(ft.models.at(0), re_instances(vocab, data, nullptr, ft.max_seq_len), vocab.pad_id(), true);
}

std::vector<ClassPrediction> predict_nli(const FineTuned& ft, const bpe::Vocabulary& vocab,
                                         std::span<const NliExample> data) {
  require_task(ft, Task::kNli);
  std::vector<Instance> inst;
  for (const auto& e : data) inst.push_back(from_packed(pack_pair(vocab, e.hypothesis, e.premise, ft.max_seq_len)));
  return classify(ft.models.at(0), inst, vocab.pad_id(), false);
}

std::vector<double> predict_sts(const FineTuned& ft, const bpe::Vocabulary& vocab, std::span<const StsExample> data) {
  require_task(ft, Task::kSts);
  const TaskModel& m = ft.models.at(0);
  std::vector<Instance> inst;
  for (const auto& e : data) inst.push_back(from_packed(pack_pair(vocab, e.a, e.b, ft.max_seq_len)));
  std::vector<double> out;
  for_each_batch(m, inst, vocab.pad_id(), [&](std::size_t, const auto& rows, const Batch&, const auto& enc_out,
                                              Tape<float>& tape) {
    Tensor<float> y = model::linear(tape, enc_out.pooled, m.head);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.push_back(std::clamp(static_cast<double>(y.data()[r]), kStsMin, kStsMax));
    }
  });
  return out;
}

std::vector<QaPrediction> predict_qa(const FineTuned& ft, const bpe::Vocabulary& vocab,
                                     std::span<const QaExample> data) {
  require_task(ft, Task::kQa);
  const TaskModel& m = ft.models.at(0);
  std::vector<QaPrediction> out;
  for (const auto& e : data) {
    QaContext c = qa_context(vocab, e, ft.qa, ft.max_seq_len);
    std::vector<Instance> inst;
    for (const auto& win : c.windows) inst.push_back(qa_instance(win));
    QaPrediction best;
    for_each_batch(m, inst, vocab.pad_id(), [&](std::size_t first, const auto& rows, const Batch& batch,
                                                const auto& enc_out, Tape<float>& tape) {
      auto [start, end] = qa_logits(m, tape, rows, batch, enc_out.hidden);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const QaWindow& win = c.windows[first + r];
        SpanChoice s = best_span(start.data().subspan(r * batch.seq, batch.seq),
                                 end.data().subspan(r * batch.seq, batch.seq), win.context_offset, win.length,
                                 ft.qa.max_answer);
        if (!s.found || (best.found && s.score <= best.score)) continue;
        std::size_t i = win.start + s.start - win.context_offset;
        std::size_t j = win.start + s.end - win.context_offset;
        best.found = true;
        best.start = c.context.offsets[i].first;
        best.end = c.context.offsets[j].second;
        best.text = e.context.substr(best.start, best.end - best.start);
        best.score = s.score;
      }
    });
    out.push_back(std::move(best));
  }
  return out;
}

double ner_loss(const FineTuned& ft, const bpe::Vocabulary& vocab, std::span<const NerExample> data,
                std::size_t pad_to) {
  require_task(ft, Task::kNer);
  double total = 0.0;
  for (std::size_t k = 0; k < ft.models.size(); ++k) {
    const TaskModel& m = ft.models[k];
    std::string only = ft.ner_mode == NerMode::kPerCategory ? ft.categories.at(k) : "";
    auto inst = ner_instances(vocab, data, m.labels, only, ft.max_seq_len);
    std::vector<const Instance*> rows;
    for (const auto& i : inst) rows.push_back(&i);
    Batch batch = pack_batch(rows, vocab.pad_id());
    if (pad_to > batch.seq) {
      Batch wide;
      wide.batch = batch.batch;
      wide.seq = pad_to;
      wide.ids.assign(wide.batch * pad_to, vocab.pad_id());
      wide.segments.assign(wide.batch * pad_to, 0);
      wide.mask.assign(wide.batch * pad_to, 0);
      for (std::size_t r = 0; r < batch.batch; ++r) {
        for (std::size_t p = 0; p < batch.seq; ++p) {
          wide.ids[r * pad_to + p] = batch.ids[r * batch.seq + p];
          wide.segments[r * pad_to + p] = batch.segments[r * batch.seq + p];
          wide.mask[r * pad_to + p] = batch.mask[r * batch.seq + p];
        }
      }
      batch = std::move(wide);
    }
    Tape<float> tape(false);
    auto out = model::forward(m.encoder, tape, batch);
    total += ner_loss_fn(m, tape, rows, batch, out).data()[0];
  }
  return total;
}

std::vector<float> pair_logits(const FineTuned& ft, const bpe::Vocabulary& vocab, const Packed& packed) {
  if (ft.task == Task::kNer || ft.task == Task::kQa) {
    throw ConfigError("pair_logits needs an re, sts or nli model");
  }
  const TaskModel& m = ft.models.at(0);
  std::vector<Instance> inst{from_packed(packed)};
  if (ft.task == Task::kRe) inst[0].markers = find_markers(vocab, packed.ids);
  std::vector<float> out;
  for_each_batch(m, inst, vocab.pad_id(), [&](std::size_t, const auto& rows, const Batch& batch, const auto& enc_out,
                                              Tape<float>& tape) {
    Tensor<float> x = ft.task == Task::kRe ? re_features(m, tape, rows, batch, enc_out.hidden) : enc_out.pooled;
    Tensor<float> logits = model::linear(tape, x, m.head);
    out.assign(logits.data().begin(), logits.data().end());
  });
  return out;
}

// --- scoring -----------------------------------------------------------------

std::vector<metrics::Span> gold_spans(const NerExample& e) { return bio_decode(e.labels); }

json score_ner(std::span<const NerExample> gold, const std::vector<std::vector<metrics::Span>>& pred) {
  if (gold.size() != pred.size()) throw ValueError("score_ner: gold and prediction counts differ");
  // Spans from different sentences are kept apart by a running token offset.
  std::vector<metrics::Span> g, p;
  std::size_t base = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    for (auto s : gold_spans(gold[i])) g.push_back({s.start + base, s.end + base, s.category});
    for (auto s : pred[i]) p.push_back({s.start + base, s.end + base, s.category});
    base += gold[i].tokens.size() + 1;
  }
  auto r = metrics::span_prf(g, p);
  return metrics::report("ner", {{"precision", r.overall.precision}, {"recall", r.overall.recall}, {"f1", r.overall.f1}},
                         r.per_category);
}

json score_re(std::span<const ReExample> gold, std::span<const ClassPrediction> pred) {
  if (gold.size() != pred.size()) throw ValueError("score_re: gold and prediction counts differ");
  std::map<std::string, std::array<std::size_t, 3>> counts;  // tp, predicted, gold
  std::array<std::size_t, 3> all{};
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto& gl = gold[i].label;
    const auto& pl = pred[i].label;
    if (gl != kNoRelation) {
      ++counts[gl][2];
      ++all[2];
    }
    if (pl != kNoRelation) {
      ++counts[pl][1];
      ++all[1];
    }
    if (gl == pl && gl != kNoRelation) {
      ++counts[gl][0];
      ++all[0];
    }
  }
  std::map<std::string, metrics::Prf> per;
  for (const auto& [label, c] : counts) per[label] = metrics::prf_from_counts(c[0], c[1], c[2]);
  auto overall = metrics::prf_from_counts(all[0], all[1], all[2]);
  return metrics::report("re", {{"precision", overall.precision}, {"recall", overall.recall}, {"f1", overall.f1}},
                         per);
}

json score_sts(std::span<const StsExample> gold, std::span<const double> pred) {
  if (gold.size() != pred.size()) throw ValueError("score_sts: gold and prediction counts differ");
  std::vector<double> g;
  double se = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    g.push_back(gold[i].score);
    se += (gold[i].score - pred[i]) * (gold[i].score - pred[i]);
  }
  return metrics::report("sts", {{"pearson", metrics::pearson(g, pred)}, {"mse", se / static_cast<double>(g.size())}});
}

json score_nli(std::span<const NliExample> gold, std::span<const ClassPrediction> pred) {
  std::vector<std::string> g, p;
  for (const auto& e : gold) g.push_back(e.label);
  for (const auto& e : pred) p.push_back(e.label);
  return metrics::report("nli", {{"accuracy", metrics::accuracy(g, p)}});
}

json score_qa(std::span<const QaExample> gold, std::span<const QaPrediction> pred) {
  if (gold.size() != pred.size()) throw ValueError("score_qa: gold and prediction counts differ");
  if (gold.empty()) throw ValueError("score_qa: no examples");
  double em = 0.0, f1 = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    std::vector<std::string> texts;
    for (const auto& a : gold[i].answers) texts.push_back(a.text);
    if (texts.empty()) texts.push_back("");
    auto s = metrics::qa_em_f1(texts, pred[i].found ? pred[i].text : "");
    em += s.exact_match;
    f1 += s.f1;
  }
  double n = static_cast<double>(gold.size());
  return metrics::report("qa", {{"exact_match", em / n}, {"f1", f1 / n}});
}

// --- persistence ---------------------------------------------------------------

void save_finetuned(const std::filesystem::path& dir, const FineTuned& ft, const json& metadata) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json models = json::array();
  for (std::size_t i = 0; i < ft.models.size(); ++i) {
    const auto& m = ft.models[i];
    std::string file = "model-" + std::to_string(i) + ".ckpt";
    auto ckpt = model::make_checkpoint(m.encoder, metadata);
    model::add_tensors<float>(ckpt, {{"head.weight", m.head.weight}, {"head.bias", m.head.bias}});
    model::save_checkpoint(dir / file, ckpt);
    models.push_back({{"file", file}, {"labels", m.labels}});
  }
  json task = {{"task", task_name(ft.task)},
               {"ner_mode", ft.ner_mode == NerMode::kUnified ? "unified" : "per-category"},
               {"categories", ft.categories},
               {"max_seq_len", ft.max_seq_len},
               {"qa",
                {{"max_question", ft.qa.max_question},
                 {"window", ft.qa.window},
                 {"stride", ft.qa.stride},
                 {"max_answer", ft.qa.max_answer}}},
               {"epoch_losses", ft.epoch_losses},
               {"models", models},
               {"metadata", metadata}};
  write_file_atomic(dir / "task.json", task.dump(2) + "\n");
}

FineTuned load_finetuned(const std::filesystem::path& dir) {
  json task;
  try {
    task = json::parse(read_file(dir / "task.json"));
    FineTuned ft;
    ft.task = parse_task(task.at("task").get<std::string>());
    ft.ner_mode = task.at("ner_mode").get<std::string>() == "unified" ? NerMode::kUnified : NerMode::kPerCategory;
    ft.categories = task.at("categories").get<std::vector<std::string>>();
    ft.max_seq_len = task.at("max_seq_len").get<std::size_t>();
    const json& qa = task.at("qa");
    ft.qa = {qa.at("max_question").get<std::size_t>(), qa.at("window").get<std::size_t>(),
             qa.at("stride").get<std::size_t>(), qa.at("max_answer").get<std::size_t>()};
    ft.epoch_losses = task.at("epoch_losses").get<std::vector<double>>();
    for (const auto& entry : task.at("models")) {
      auto ckpt = model::load_checkpoint(dir / entry.at("file").get<std::string>());
      TaskModel m;
      m.encoder = model::encoder_from_checkpoint<float>(ckpt);
      m.head.weight = model::checkpoint_tensor<float>(ckpt, "head.weight");
      m.head.bias = model::checkpoint_tensor<float>(ckpt, "head.bias");
      m.labels = entry.at("labels").get<std::vector<std::string>>();
      ft.models.push_back(std::move(m));
    }
    if (ft.models.empty()) throw SchemaError("no models listed");
    return ft;
  } catch (const json::exception& e) {
    throw SchemaError((dir / "task.json").string() + ": " + e.what());
  }
}

}  // namespace clinlm::tasks

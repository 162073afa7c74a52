// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/pretrain/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "clinlm/common/error.hpp"
#include "clinlm/common/hash.hpp"
#include "clinlm/parallel/tensor_parallel.hpp"
#include "clinlm/tensor/ops.hpp"

namespace clinlm::pretrain {

using model::Encoder;

MlmExample make_mlm_example(std::span<const std::int32_t> ids, const bpe::Vocabulary& vocab, double rate, Rng& rng,
                            bool bert_mix) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("mask rate must be in [0, 1], got " + std::to_string(rate));
  MlmExample ex;
  ex.input_ids.assign(ids.begin(), ids.end());
  ex.label_ids.assign(ids.size(), kIgnore);
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!vocab.is_special(ids[i])) maskable.push_back(i);
  const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(maskable.size())));
  const std::size_t first_regular = vocab.specials().size();
  for (std::size_t pick : rng.sample_without_replacement(maskable.size(), k)) {
    const std::size_t pos = maskable[pick];
    ex.mask_positions.push_back(pos);
    ex.label_ids[pos] = ids[pos];
    if (!bert_mix) {
      ex.input_ids[pos] = vocab.mask_id();
      continue;
    }
    const double u = rng.uniform();
    if (u < 0.8) {
      ex.input_ids[pos] = vocab.mask_id();
    } else if (u < 0.9 && vocab.size() > first_regular) {
      ex.input_ids[pos] = static_cast<std::int32_t>(first_regular + rng.uniform_int(vocab.size() - first_regular));
    }
  }
  return ex;
}

std::optional<SopExample> make_sop_example(std::span<const std::vector<std::int32_t>> sentences, std::size_t i,
                                           const bpe::Vocabulary& vocab, std::size_t max_len, Rng& rng) {
  if (sentences.size() < 2) return std::nullopt;
  if (i + 1 >= sentences.size())
    throw ValueError("sentence pair " + std::to_string(i) + " out of range for " + std::to_string(sentences.size()) +
                     " sentences");
  if (max_len < 5) throw ConfigError("max_len " + std::to_string(max_len) + " leaves no room for a sentence pair");
  std::vector<std::int32_t> a = sentences[i], b = sentences[i + 1];
  SopExample ex;
  if (rng.bernoulli(0.5)) {
    std::swap(a, b);
    ex.label = kSwapped;
  }
  while (a.size() + b.size() + 3 > max_len) {
    if (a.size() >= b.size())
      a.pop_back();
    else
      b.pop_back();
  }
  ex.input_ids.push_back(vocab.cls_id());
  ex.input_ids.insert(ex.input_ids.end(), a.begin(), a.end());
  ex.input_ids.push_back(vocab.sep_id());
  ex.segment_ids.assign(ex.input_ids.size(), 0);
  ex.input_ids.insert(ex.input_ids.end(), b.begin(), b.end());
  ex.input_ids.push_back(vocab.sep_id());
  ex.segment_ids.resize(ex.input_ids.size(), 1);
  return ex;
}

std::vector<TokenizedDoc> tokenize_documents(std::span<const corpus::CleanDocument> docs, const bpe::Vocabulary& vocab) {
  bpe::WordCache cache(vocab);
  std::vector<TokenizedDoc> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    TokenizedDoc t{d.id, {}};
    for (const auto& sentence : d.sentences) {
      std::vector<std::int32_t> ids;
      for (const auto& w : sentence) {
        const auto& piece = cache.word(w);
        ids.insert(ids.end(), piece.begin(), piece.end());
      }
      if (!ids.empty()) t.sentences.push_back(std::move(ids));
    }
    out.push_back(std::move(t));
  }
  return out;
}

bool is_validation(std::string_view doc_id, double fraction) {
  // FNV alone leaves the high bits nearly constant across ids that differ
  // only in their last characters; a splitmix finalizer spreads them.
  std::uint64_t h = fnv1a(doc_id);
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return static_cast<double>(h >> 11) * 0x1.0p-53 < fraction;
}

Split split_corpus(std::vector<TokenizedDoc> docs, double val_fraction) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  std::sort(docs.begin(), docs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  Split s;
  for (auto& d : docs) (is_validation(d.id, val_fraction) ? s.val : s.train).push_back(std::move(d));
  return s;
}

std::string TrainLog::to_csv() const {
  std::ostringstream out;
  out << "step,split,loss,seconds\n" << std::setprecision(9);
  for (const auto& r : rows) out << r.step << ',' << r.split << ',' << r.loss << ',' << r.seconds << '\n';
  return out.str();
}

std::vector<PairRef> sentence_pairs(std::span<const TokenizedDoc> docs) {
  std::vector<PairRef> pairs;
  for (std::size_t d = 0; d < docs.size(); ++d)
    for (std::size_t i = 0; i + 1 < docs[d].sentences.size(); ++i) pairs.push_back({d, i});
  return pairs;
}

namespace {

constexpr std::uint64_t kExampleSalt = 0x5eedc0de;
constexpr std::uint64_t kDropoutSalt = 0xd809u;
constexpr std::uint64_t kEpochSalt = 0xe90c;
constexpr std::int64_t kValidationStep = -1;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return fnv1a(std::to_string(a) + ":" + std::to_string(b)); }

}  // namespace

PretrainBatch make_batch(std::span<const TokenizedDoc> docs, std::span<const PairRef> pairs, const bpe::Vocabulary& vocab,
                         std::size_t max_len, double mask_rate, bool bert_mix, std::uint64_t seed, std::int64_t step,
                         std::size_t first_slot) {
  const Rng base(seed ^ kExampleSalt);
  std::vector<std::vector<std::int32_t>> ids, segments;
  PretrainBatch out;
  std::vector<MlmExample> mlm;
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    Rng rng = base.fork(mix(static_cast<std::uint64_t>(step), first_slot + j));
    const auto& doc = docs[pairs[j].doc];
    auto sop = make_sop_example(doc.sentences, pairs[j].sentence, vocab, max_len, rng);
    auto ex = make_mlm_example(sop->input_ids, vocab, mask_rate, rng, bert_mix);
    ids.push_back(ex.input_ids);
    segments.push_back(sop->segment_ids);
    out.sop_labels.push_back(sop->label);
    mlm.push_back(std::move(ex));
  }
  out.inputs = model::Batch::pack(ids, vocab.pad_id(), segments);
  for (std::size_t j = 0; j < mlm.size(); ++j) {
    for (auto pos : mlm[j].mask_positions) {
      out.mlm_rows.push_back(static_cast<std::int32_t>(j * out.inputs.seq + pos));
      out.mlm_targets.push_back(mlm[j].label_ids[pos]);
    }
  }
  return out;
}

namespace {

struct LossParts {
  Tensor<float> total;
  double mlm_sum = 0.0;  // unweighted sums, for evaluation
  double sop_sum = 0.0;
};

// Weighted MLM + SOP cross-entropy; weights of 1 give sums.
LossParts batch_loss(const Encoder<float>& model, Tape<float>& tape, const PretrainBatch& b, float mlm_weight,
                     float sop_weight, const model::ForwardOptions& opts, model::ParallelHooks<float>* hooks) {
  auto out = model::forward(model, tape, b.inputs, opts, hooks);
  LossParts parts;
  std::vector<float> ws(b.sop_labels.size(), sop_weight);
  auto sop = ops::softmax_cross_entropy(tape, model::sop_logits(model, tape, out.pooled),
                                        std::span<const std::int32_t>(b.sop_labels), std::span<const float>(ws));
  parts.sop_sum = static_cast<double>(sop.item()) / sop_weight;
  parts.total = sop;
  if (!b.mlm_rows.empty()) {
    std::vector<float> wm(b.mlm_rows.size(), mlm_weight);
    auto mlm = ops::softmax_cross_entropy(tape, model::mlm_logits(model, tape, out.hidden, b.mlm_rows),
                                          std::span<const std::int32_t>(b.mlm_targets), std::span<const float>(wm));
    parts.mlm_sum = static_cast<double>(mlm.item()) / mlm_weight;
    parts.total = ops::add(tape, mlm, sop);
  }
  return parts;
}

}  // namespace

ValLoss evaluate(const Encoder<float>& model, std::span<const PretrainBatch> batches,
                 model::ParallelHooks<float>* hooks) {
  double mlm = 0.0, sop = 0.0;
  std::size_t masked = 0, examples = 0;
  Tape<float> tape(false);
  for (const auto& b : batches) {
    auto parts = batch_loss(model, tape, b, 1.0f, 1.0f, {}, hooks);
    mlm += parts.mlm_sum;
    sop += parts.sop_sum;
    masked += b.mlm_rows.size();
    examples += b.sop_labels.size();
  }
  if (examples == 0) throw ValueError("evaluation set is empty");
  ValLoss v;
  v.mlm = masked ? mlm / static_cast<double>(masked) : 0.0;
  v.sop = sop / static_cast<double>(examples);
  v.total = v.mlm + v.sop;
  return v;
}

double masked_accuracy(const Encoder<float>& model, std::span<const PretrainBatch> batches,
                       model::ParallelHooks<float>* hooks) {
  std::size_t hits = 0, total = 0;
  Tape<float> tape(false);
  for (const auto& b : batches) {
    if (b.mlm_rows.empty()) continue;
    auto out = model::forward(model, tape, b.inputs, {}, hooks);
    auto logits = model::mlm_logits(model, tape, out.hidden, b.mlm_rows);
    const std::size_t v = logits.dim(1);
    auto d = logits.data();
    for (std::size_t i = 0; i < b.mlm_rows.size(); ++i) {
      auto row = d.subspan(i * v, v);
      const auto best = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      hits += best == b.mlm_targets[i];
      ++total;
    }
  }
  if (total == 0) throw ValueError("no masked positions to score");
  return static_cast<double>(hits) / static_cast<double>(total);
}

PretrainResult pretrain(Encoder<float>& model, const Split& data, const bpe::Vocabulary& vocab,
                        const PretrainConfig& cfg, const ParallelContext& par) {
  if (cfg.batch == 0) throw ConfigError("batch must be positive");
  if (cfg.eval_every <= 0) throw ConfigError("eval_every must be positive");
  if (cfg.patience <= 0) throw ConfigError("patience must be positive");
  if (cfg.max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (static_cast<std::size_t>(model.cfg.vocab_size) != vocab.size())
    throw ConfigError("model vocab_size " + std::to_string(model.cfg.vocab_size) + " != tokenizer size " +
                      std::to_string(vocab.size()));
  parallel::LocalFabric local;
  parallel::Fabric& dp = par.data ? *par.data : local;
  parallel::Fabric& world = par.world ? *par.world : local;
  const std::size_t replicas = dp.size();
  if (cfg.batch % replicas != 0)
    throw ConfigError("batch " + std::to_string(cfg.batch) + " is not divisible by data parallel size " +
                      std::to_string(replicas));
  const std::size_t micro = cfg.batch / replicas;
  const std::size_t max_len = model.cfg.max_seq_len;

  const auto train_pairs = sentence_pairs(data.train);
  if (train_pairs.empty()) throw ValueError("pretraining corpus has no sentence pairs");
  auto val_pairs = sentence_pairs(data.val);
  if (val_pairs.empty()) throw ValueError("validation split has no sentence pairs; raise val_fraction");
  if (val_pairs.size() > cfg.max_val_examples) val_pairs.resize(cfg.max_val_examples);
  std::vector<PretrainBatch> val_batches;
  for (std::size_t at = 0; at < val_pairs.size(); at += cfg.batch) {
    const std::size_t n = std::min(cfg.batch, val_pairs.size() - at);
    val_batches.push_back(make_batch(data.val, std::span(val_pairs).subspan(at, n), vocab, max_len, cfg.mask_rate,
                                     cfg.bert_mix, cfg.seed, kValidationStep, at));
  }

  // Epoch-order permutation of the training pairs, regenerated lazily.
  std::vector<std::size_t> order(train_pairs.size());
  std::int64_t order_epoch = -1;
  auto pair_at = [&](std::uint64_t g) {
    const auto epoch = static_cast<std::int64_t>(g / train_pairs.size());
    if (epoch != order_epoch) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng(cfg.seed).fork(mix(kEpochSalt, static_cast<std::uint64_t>(epoch))).shuffle(order);
      order_epoch = epoch;
    }
    return train_pairs[order[g % train_pairs.size()]];
  };

  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (!cfg.wall_time) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  PretrainResult res;
  const ValLoss v0 = evaluate(model, val_batches, par.hooks);
  res.initial_val = res.best_val = v0.total;
  res.initial_val_mlm = v0.mlm;
  res.best = model.clone();
  res.log.rows.push_back({0, "val", v0.total, elapsed()});

  AdamState<float> adam;
  const Rng dropout_base(cfg.seed ^ kDropoutSalt);
  res.stop_reason = "max_steps";
  for (std::int64_t step = 1; step <= cfg.max_steps; ++step) {
    float stop_flag = cfg.stop && cfg.stop->load() ? 1.0f : 0.0f;
    world.all_reduce(std::span<float>(&stop_flag, 1), -1, "all_reduce.stop");
    if (stop_flag > 0.0f) {
      res.stop_reason = "interrupted";
      break;
    }
    for (parallel::Fabric* f : {par.world, par.data, par.model})
      if (f) f->set_step(static_cast<std::uint64_t>(step));

    const std::size_t first = dp.rank() * micro;
    std::vector<PairRef> refs;
    for (std::size_t j = 0; j < micro; ++j)
      refs.push_back(pair_at(static_cast<std::uint64_t>(step - 1) * cfg.batch + first + j));
    const PretrainBatch batch =
        make_batch(data.train, refs, vocab, max_len, cfg.mask_rate, cfg.bert_mix, cfg.seed, step, first);

    model.zero_grad();
    double loss_value;
    {
      Tape<float> tape;
      Rng drop = dropout_base.fork(mix(static_cast<std::uint64_t>(step), dp.rank()));
      model::ForwardOptions opts{true, &drop};
      // Weights use the global masked count, scaled by R because gradients
      // are averaged over replicas: the result is the full-batch mean.
      double masked = static_cast<double>(batch.mlm_rows.size());
      if (replicas > 1) dp.all_reduce(std::span<double>(&masked, 1), -1, "all_reduce.count");
      const float r = static_cast<float>(replicas);
      const float wm = masked == 0.0 ? 0.0f : r / static_cast<float>(masked);
      const float ws = r / static_cast<float>(cfg.batch);
      auto parts = batch_loss(model, tape, batch, wm, ws, opts, par.hooks);
      loss_value = static_cast<double>(parts.total.item());
      if (!std::isfinite(loss_value)) throw NumericError("non-finite training loss at step " + std::to_string(step));
      tape.backward(parts.total);
    }
    parallel::average_gradients(model, dp);
    auto params = model.parameters();
    try {
      adam_step(params, adam, cfg.adam);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    parallel::check_replicas(model, dp, step);
    if (replicas > 1) {
      double l = loss_value / static_cast<double>(replicas);
      dp.all_reduce(std::span<double>(&l, 1), -1, "all_reduce.loss");
      loss_value = l;
    }
    res.steps = step;
    res.log.rows.push_back({step, "train", loss_value, elapsed()});

    if (step % cfg.eval_every == 0) {
      const ValLoss v = evaluate(model, val_batches, par.hooks);
      res.log.rows.push_back({step, "val", v.total, elapsed()});
      if (v.total < res.best_val - cfg.min_delta) {
        res.best_val = v.total;
        res.best_step = step;
        res.best = model.clone();
        res.evals_since_best = 0;
      } else if (++res.evals_since_best >= cfg.patience) {
        res.stop_reason = "patience";
        break;
      }
    }
  }
  return res;
}

// --- synthetic notes ----------------------------------------------------------

namespace {

struct Case {
  const char* condition;
  const char* complaint;
  const char* drug;
  const char* lab;
  const char* lab_value;
  const char* cause;
  const char* action;
  const char* plan_drug;
};

constexpr Case kCases[] = {
    {"diabetes", "fatigue", "metformin", "glucose", "high", "hyperglycemia", "increase", "insulin"},
    {"hypertension", "headache", "lisinopril", "creatinine", "normal", "uncontrolled pressure", "add",
     "amlodipine"},
    {"asthma", "wheezing", "albuterol", "eosinophils", "elevated", "allergen exposure", "start", "fluticasone"},
    {"heart failure", "dyspnea", "furosemide", "BNP", "elevated", "volume overload", "increase", "spironolactone"},
    {"atrial fibrillation", "palpitations", "warfarin", "INR", "low", "rapid ventricular rate", "add", "metoprolol"},
    {"COPD", "cough", "tiotropium", "bicarbonate", "high", "bronchitis", "start", "prednisone"},
    {"hypothyroidism", "weight gain", "levothyroxine", "TSH", "high", "underdosing", "increase", "levothyroxine"},
    {"depression", "insomnia", "sertraline", "sodium", "normal", "mood disorder", "add", "trazodone"},
    {"pneumonia", "fever", "azithromycin", "WBC", "elevated", "bacterial infection", "start", "ceftriaxone"},
    {"anemia", "dizziness", "ferrous sulfate", "hemoglobin", "low", "iron deficiency", "continue", "ferrous sulfate"},
    {"gout", "joint pain", "allopurinol", "uric acid", "high", "gout flare", "start", "colchicine"},
    {"kidney disease", "edema", "losartan", "potassium", "high", "fluid retention", "reduce", "losartan"},
};

constexpr const char* kNames[] = {"Smith", "Johnson", "Williams", "Brown", "Jones", "Garcia", "Miller", "Davis",
                                  "Wilson", "Moore", "Taylor", "Thomas", "Lee", "Clark", "Lewis", "Walker"};
constexpr const char* kFrequency[] = {"daily", "twice daily", "nightly"};
constexpr int kDoses[] = {5, 10, 20, 25, 40, 50, 100, 500};

void push_words(std::vector<std::string>& out, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
}

template <std::size_t N, typename T>
const T& pick(Rng& rng, const T (&items)[N]) {
  return items[rng.uniform_int(N)];
}

}  // namespace

std::vector<corpus::CleanDocument> synthetic_clinical_notes(std::size_t n_docs, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<corpus::CleanDocument> docs;
  docs.reserve(n_docs);
  for (std::size_t d = 0; d < n_docs; ++d) {
    const Case& c = pick(rng, kCases);
    const bool female = rng.bernoulli(0.5);
    const std::string pron = female ? "She" : "He";
    const std::string age = std::to_string(25 + rng.uniform_int(66));
    std::vector<std::string> sentences = {
        std::string("Mr. ") + pick(rng, kNames) + " is a " + age + " year old " + (female ? "woman" : "man") +
            " with a history of " + c.condition + " .",
        pron + " presents with " + c.complaint + " for " + std::to_string(2 + rng.uniform_int(9)) + " days .",
        pron + " takes " + c.drug + " " + std::to_string(pick(rng, kDoses)) + " mg " + pick(rng, kFrequency) + " .",
        "Blood pressure is " + std::to_string(110 + 5 * rng.uniform_int(10)) + "/" +
            std::to_string(60 + 5 * rng.uniform_int(6)) + " and heart rate is " +
            std::to_string(60 + rng.uniform_int(40)) + " .",
        std::string("Labs show ") + c.lab_value + " " + c.lab + " .",
        std::string("Assessment is ") + c.complaint + " due to " + c.cause + " .",
        std::string("Plan is to ") + c.action + " " + c.plan_drug + " and follow up in " +
            std::to_string(1 + rng.uniform_int(6)) + " weeks .",
    };
    if (female) sentences[0].replace(0, 3, "Ms.");
    corpus::CleanDocument doc;
    doc.id = "note-" + std::to_string(seed) + "-" + std::to_string(d);
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      // Optional middle sections vary document length without breaking order.
      if (i >= 2 && i <= 4 && rng.bernoulli(0.2)) continue;
      std::vector<std::string> words;
      push_words(words, sentences[i]);
      doc.sentences.push_back(std::move(words));
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace clinlm::pretrain

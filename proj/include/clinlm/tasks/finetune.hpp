// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

// Fine-tuning heads on top of a pretrained encoder:
//   ner  per-token linear over the BIO label set (first subword of each word)
//   re   linear over concat(h[CLS], h[S1], h[E1], h[S2], h[E2]), width 5H
//   sts  scalar linear on the pooled [CLS] state, MSE, clipped to [0, 5]
//   nli  linear over {entailment, contradiction, neutral} on pooled [CLS]
//   qa   start/end linear per token over sliding windows
#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "clinlm/metrics/metrics.hpp"
#include "clinlm/model/encoder.hpp"
#include "clinlm/tasks/examples.hpp"
#include "clinlm/tasks/structure.hpp"
#include "clinlm/tensor/adam.hpp"
#include "clinlm/tokenizer/bpe.hpp"

namespace clinlm::tasks {

enum class Task { kNer, kRe, kSts, kNli, kQa };

std::string_view task_name(Task task);
// ConfigError on an unknown name.
Task parse_task(std::string_view name);

enum class NerMode { kUnified, kPerCategory };

struct FinetuneConfig {
  std::size_t epochs = 80;
  std::size_t batch = 8;
  AdamConfig adam{.lr = 1e-3, .warmup_steps = 10};
  std::uint64_t seed = 0;
  // 0 uses the encoder's max_seq_len.
  std::size_t max_seq_len = 0;
  NerMode ner_mode = NerMode::kUnified;
  QaWindowing qa;
  const std::atomic<bool>* stop = nullptr;
  std::function<void(std::size_t epoch, double mean_loss)> on_epoch;

  nlohmann::json to_json() const;
};

struct TaskModel {
  model::Encoder<float> encoder;
  model::Linear<float> head;
  std::vector<std::string> labels;  // output classes; empty for sts and qa

  std::vector<Tensor<float>> parameters() const;
};

struct FineTuned {
  Task task = Task::kNli;
  NerMode ner_mode = NerMode::kUnified;
  // Per-category NER keeps one binary-BIO model per category, in this order.
  std::vector<std::string> categories;
  std::vector<TaskModel> models;
  std::size_t max_seq_len = 0;
  QaWindowing qa;
  std::vector<double> epoch_losses;
};

// --- input packing -----------------------------------------------------------

struct Packed {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segments;
};

// [CLS] a [SEP] b [SEP], trimming the longer side from its end until it
// fits. ConfigError when max_len < 5.
Packed pack_pair(const bpe::Vocabulary& vocab, std::string_view a, std::string_view b, std::size_t max_len);

struct NerInput {
  Packed packed;
  // Packed position of the first subword of each word; words cut by
  // truncation are absent.
  std::vector<std::size_t> word_starts;
};

NerInput pack_ner(const bpe::Vocabulary& vocab, std::span<const std::string> tokens, std::size_t max_len);

struct MarkerPositions {
  std::size_t s1, e1, s2, e2;
};

// ValueError naming the first marker that is absent from the packed ids.
MarkerPositions find_markers(const bpe::Vocabulary& vocab, std::span<const std::int32_t> ids);

Packed pack_relation(const bpe::Vocabulary& vocab, const ReExample& e, std::size_t max_len);

// --- training and inference --------------------------------------------------

FineTuned finetune_ner(const model::Encoder<float>& encoder, const bpe::Vocabulary& vocab,
                       std::span<const NerExample> data, const FinetuneConfig& cfg);
FineTuned finetune_re(const model::Encoder<float>& encoder, const bpe::Vocabulary& vocab,
                      std::span<const ReExample> data, const FinetuneConfig& cfg);
FineTuned finetune_sts(const model::Encoder<float>& encoder, const bpe::Vocabulary& vocab,
                       std::span<const StsExample> data, const FinetuneConfig& cfg);
FineTuned finetune_nli(const model::Encoder<float>& encoder, const bpe::Vocabulary& vocab,
                       std::span<const NliExample> data, const FinetuneConfig& cfg);
FineTuned finetune_qa(const model::Encoder<float>& encoder, const bpe::Vocabulary& vocab,
                      std::span<const QaExample> data, const FinetuneConfig& cfg);

// Word-level spans; per-category predictions are unioned.
std::vector<std::vector<metrics::Span>> predict_ner(const FineTuned& ft, const bpe::Vocabulary& vocab,
                                                    std::span<const NerExample> data);

struct ClassPrediction {
  std::string label;
  std::vector<double> probabilities;  // aligned with TaskModel::labels
};

std::vector<ClassPrediction> predict_re(const FineTuned& ft, const bpe::Vocabulary& vocab,
                                        std::span<const ReExample> data);
std::vector<ClassPrediction> predict_nli(const FineTuned& ft, const bpe::Vocabulary& vocab,
                                         std::span<const NliExample> data);
std::vector<double> predict_sts(const FineTuned& ft, const bpe::Vocabulary& vocab, std::span<const StsExample> data);

struct QaPrediction {
  bool found = false;  // false when no window offers a valid span
  std::size_t start = 0;
  std::size_t end = 0;  // byte offsets into the context
  std::string text;
  double score = 0.0;
};

std::vector<QaPrediction> predict_qa(const FineTuned& ft, const bpe::Vocabulary& vocab,
                                     std::span<const QaExample> data);

// Summed token cross-entropy of the NER model(s) on `data`, with every row
// right-padded to at least `pad_to` positions.
double ner_loss(const FineTuned& ft, const bpe::Vocabulary& vocab, std::span<const NerExample> data,
                std::size_t pad_to = 0);

// Raw logits for one packed pair with the pair-classification head; used by
// determinism and order-sensitivity checks.
std::vector<float> pair_logits(const FineTuned& ft, const bpe::Vocabulary& vocab, const Packed& packed);

// --- scoring -----------------------------------------------------------------

std::vector<metrics::Span> gold_spans(const NerExample& e);

nlohmann::json score_ner(std::span<const NerExample> gold, const std::vector<std::vector<metrics::Span>>& pred);
// Micro P/R/F1 over every label except no-relation.
nlohmann::json score_re(std::span<const ReExample> gold, std::span<const ClassPrediction> pred);
nlohmann::json score_sts(std::span<const StsExample> gold, std::span<const double> pred);
nlohmann::json score_nli(std::span<const NliExample> gold, std::span<const ClassPrediction> pred);
nlohmann::json score_qa(std::span<const QaExample> gold, std::span<const QaPrediction> pred);

// --- persistence ---------------------------------------------------------------

// A directory with task.json and one checkpoint per model (model-<i>.ckpt),
// each holding the encoder plus head.weight and head.bias.
void save_finetuned(const std::filesystem::path& dir, const FineTuned& ft,
                    const nlohmann::json& metadata = nlohmann::json::object());
FineTuned load_finetuned(const std::filesystem::path& dir);

}  // namespace clinlm::tasks

// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clinlm/common/rng.hpp"
#include "clinlm/corpus/corpus.hpp"
#include "clinlm/model/encoder.hpp"
#include "clinlm/parallel/fabric.hpp"
#include "clinlm/tensor/adam.hpp"
#include "clinlm/tokenizer/bpe.hpp"

namespace clinlm::pretrain {

// Label value at positions that carry no MLM target.
inline constexpr std::int32_t kIgnore = -100;

struct MlmExample {
  std::vector<std::int32_t> input_ids;
  std::vector<std::int32_t> label_ids;     // original id at masked positions, kIgnore elsewhere
  std::vector<std::size_t> mask_positions;  // ascending
};

// Masks exactly round(rate * n) of the n non-special positions, chosen
// uniformly without replacement. Each is replaced by [MASK]; with
// `bert_mix` 10% become a random non-special token and 10% stay unchanged.
MlmExample make_mlm_example(std::span<const std::int32_t> ids, const bpe::Vocabulary& vocab, double rate, Rng& rng,
                            bool bert_mix = false);

struct SopExample {
  std::vector<std::int32_t> input_ids;    // [CLS] a [SEP] b [SEP]
  std::vector<std::int32_t> segment_ids;  // 0 through the first [SEP], then 1
  std::int32_t label = 0;                 // 0 in order, 1 swapped
};

inline constexpr std::int32_t kInOrder = 0;
inline constexpr std::int32_t kSwapped = 1;

// Pairs sentence i with i+1, swapping with probability 0.5. The longer side
// is trimmed first until the pair fits max_len. Returns nullopt for
// documents with fewer than two sentences.
std::optional<SopExample> make_sop_example(std::span<const std::vector<std::int32_t>> sentences, std::size_t i,
                                           const bpe::Vocabulary& vocab, std::size_t max_len, Rng& rng);

struct TokenizedDoc {
  std::string id;
  std::vector<std::vector<std::int32_t>> sentences;
};

std::vector<TokenizedDoc> tokenize_documents(std::span<const corpus::CleanDocument> docs, const bpe::Vocabulary& vocab);

// Held-out membership from a stable hash of the document id alone.
bool is_validation(std::string_view doc_id, double fraction);

struct Split {
  std::vector<TokenizedDoc> train, val;
};
Split split_corpus(std::vector<TokenizedDoc> docs, double val_fraction);

struct TrainLogRow {
  std::int64_t step = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  std::string to_csv() const;
};

struct PretrainConfig {
  std::size_t batch = 16;
  AdamConfig adam;
  double mask_rate = 0.15;
  bool bert_mix = false;
  std::int64_t eval_every = 50;
  std::int64_t patience = 3;
  double min_delta = 1e-3;
  double val_fraction = 0.05;
  std::int64_t max_steps = 2000;
  std::size_t max_val_examples = 256;
  std::uint64_t seed = 0;
  // Off writes 0 in the seconds column so logs are byte-reproducible.
  bool wall_time = true;
  // Polled once per step; set from a signal handler to stop early and keep
  // the best checkpoint.
  const std::atomic<bool>* stop = nullptr;
};

// Optional parallel runtime. `hooks` shards the model within a replica;
// `data` averages gradients across replicas, each of which trains on its
// slice of every batch. `world` spans all workers (used to agree on stop).
struct ParallelContext {
  model::ParallelHooks<float>* hooks = nullptr;
  parallel::Fabric* data = nullptr;
  parallel::Fabric* world = nullptr;
  parallel::Fabric* model = nullptr;  // only to stamp its trace with the step
};

struct PretrainResult {
  model::Encoder<float> best;
  TrainLog log;
  double initial_val = 0.0;
  double initial_val_mlm = 0.0;
  double best_val = 0.0;
  std::int64_t best_step = 0;
  std::int64_t steps = 0;
  std::int64_t evals_since_best = 0;
  std::string stop_reason;  // "patience", "max_steps" or "interrupted"
};

struct ValLoss {
  double total = 0.0;
  double mlm = 0.0;
  double sop = 0.0;
};

// Loss = mean MLM cross-entropy over masked positions + mean SOP
// cross-entropy. Evaluates at step 0 and every eval_every steps; stops once
// the validation loss has failed to improve by more than min_delta for
// `patience` consecutive evaluations. `model` is trained in place; the
// result holds a copy of the best-validation parameters.
PretrainResult pretrain(model::Encoder<float>& model, const Split& data, const bpe::Vocabulary& vocab,
                        const PretrainConfig& cfg, const ParallelContext& par = {});

// Building blocks exposed for tests and tools.
struct PretrainBatch {
  model::Batch inputs;
  std::vector<std::int32_t> mlm_rows;     // flat positions in inputs
  std::vector<std::int32_t> mlm_targets;
  std::vector<std::int32_t> sop_labels;
};

struct PairRef {
  std::size_t doc = 0;
  std::size_t sentence = 0;
};

std::vector<PairRef> sentence_pairs(std::span<const TokenizedDoc> docs);

// Example construction is keyed by (seed, step, slot), not by worker, so
// batches are identical for any parallel layout.
PretrainBatch make_batch(std::span<const TokenizedDoc> docs, std::span<const PairRef> pairs, const bpe::Vocabulary& vocab,
                         std::size_t max_len, double mask_rate, bool bert_mix, std::uint64_t seed, std::int64_t step,
                         std::size_t first_slot);

ValLoss evaluate(const model::Encoder<float>& model, std::span<const PretrainBatch> batches,
                 model::ParallelHooks<float>* hooks = nullptr);

// Top-1 accuracy of the MLM head over all masked positions.
double masked_accuracy(const model::Encoder<float>& model, std::span<const PretrainBatch> batches,
                       model::ParallelHooks<float>* hooks = nullptr);

// Clinical-note-like documents from slot templates with correlated fillers
// (a condition implies its drugs, labs and plan), in a fixed section order.
std::vector<corpus::CleanDocument> synthetic_clinical_notes(std::size_t n_docs, std::uint64_t seed);

}  // namespace clinlm::pretrain

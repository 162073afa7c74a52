// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/cli/cli.hpp"

#include <csignal>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "clinlm/common/error.hpp"
#include "clinlm/common/hash.hpp"
#include "clinlm/common/io.hpp"
#include "clinlm/corpus/corpus.hpp"
#include "clinlm/corpus/deid.hpp"
#include "clinlm/corpus/synthetic.hpp"
#include "clinlm/model/checkpoint.hpp"
#include "clinlm/model/config.hpp"
#include "clinlm/parallel/tensor_parallel.hpp"
#include "clinlm/pretrain/pretrain.hpp"
#include "clinlm/tasks/finetune.hpp"
#include "clinlm/tokenizer/bpe.hpp"

#ifndef CLINLM_GIT_DESCRIBE
#define CLINLM_GIT_DESCRIBE "unknown"
#endif

namespace clinlm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::atomic<bool>& stop_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

namespace {

extern "C" void on_signal(int) { stop_flag().store(true); }

}  // namespace

void install_signal_handlers() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
}

std::string version() { return CLINLM_GIT_DESCRIBE; }

namespace {

const std::vector<std::string> kTasks{"ner", "re", "sts", "nli", "qa"};

// --- shared helpers ------------------------------------------------------------

std::string file_hash(const fs::path& p) { return hex64(fnv1a(read_file(p))); }

std::string vocab_hash(const bpe::Vocabulary& v) { return hex64(fnv1a(v.serialize())); }

// Hash of a file, or of every regular file below a directory in path order.
std::string input_hash(const fs::path& p) {
  if (!fs::is_directory(p)) return file_hash(p);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& f : files) {
    h = fnv1a(fs::relative(f, p).generic_string(), h);
    h = fnv1a(read_file(f), h);
  }
  return hex64(h);
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

// Best-effort typing of option strings for the manifest echo.
json typed(const std::string& s) {
  if (s == "true" || s == "false") return s == "true";
  try {
    std::size_t used = 0;
    long long i = std::stoll(s, &used);
    if (used == s.size()) return i;
    double d = std::stod(s, &used);
    if (used == s.size()) return d;
  } catch (const std::exception&) {
  }
  return s;
}

json echo_options(const CLI::App& app) {
  json cfg = json::object();
  for (const CLI::Option* o : app.get_options()) {
    std::string name = o->get_single_name();
    if (name == "help" || name == "config") continue;
    const auto& results = o->results();
    if (results.size() > 1) {
      json arr = json::array();
      for (const auto& r : results) arr.push_back(typed(r));
      cfg[name] = arr;
    } else if (results.size() == 1) {
      cfg[name] = o->get_expected_min() == 0 && results[0].empty() ? json(true) : typed(results[0]);
    } else {
      cfg[name] = typed(o->get_default_str());
    }
  }
  return cfg;
}

struct Context {
  const std::vector<std::string>& args;
  std::string config;  // config file path, empty when none
  std::ostream& out;
  std::ostream& err;
};

struct Manifest {
  json j;

  Manifest(const CLI::App& sub, const Context& ctx, std::uint64_t seed) {
    j = {{"command", sub.get_name()},
         {"args", ctx.args},
         {"version", version()},
         {"seed", seed},
         {"config", echo_options(sub)},
         {"inputs", json::object()},
         {"outputs", json::object()}};
    if (!ctx.config.empty()) input("config", ctx.config);
  }

  void input(const std::string& role, const fs::path& p) {
    j["inputs"][role] = {{"path", p.string()}, {"hash", input_hash(p)}};
  }

  void output(const std::string& role, const fs::path& p) {
    j["outputs"][role] = {{"path", p.filename().string()}, {"hash", input_hash(p)}};
  }

  void write(const fs::path& dir) const { write_json(dir / "manifest.json", j); }
};

bpe::Vocabulary load_vocab(const fs::path& p) { return bpe::Vocabulary::parse(read_file(p)); }

void require_f32(const std::string& precision) {
  if (precision != "f32") {
    throw ConfigError("training and inference run in f32; f64 is used only by the gradient checks");
  }
}

// --- option groups ---------------------------------------------------------------

struct ModelArgs {
  std::string preset = "tiny";
  std::optional<std::size_t> layers, hidden, heads, intermediate, max_seq_len;
  std::optional<double> dropout;

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "Model preset")
        ->check(CLI::IsMember(model::preset_names()))
        ->capture_default_str();
    app->add_option("--layers", layers, "Override the number of layers");
    app->add_option("--hidden", hidden, "Override the hidden size");
    app->add_option("--heads", heads, "Override the attention head count");
    app->add_option("--intermediate", intermediate, "Override the FFN width");
    app->add_option("--max-seq-len", max_seq_len, "Override the maximum sequence length");
    app->add_option("--dropout", dropout, "Override the dropout rate")->check(CLI::Range(0.0, 1.0));
  }

  model::ModelConfig resolve(std::size_t vocab_size) const {
    model::ModelConfig c = model::preset(preset, vocab_size);
    if (layers) c.num_layers = *layers;
    if (hidden) c.hidden_size = *hidden;
    if (heads) c.num_heads = *heads;
    if (intermediate) c.intermediate_size = *intermediate;
    if (max_seq_len) c.max_seq_len = *max_seq_len;
    if (dropout) c.dropout = *dropout;
    c.validate();
    return c;
  }
};

struct TaskArgs {
  std::string task;
  std::string model_dir;
  std::string vocab;
  std::string data;
  std::string out;

  tasks::Task parsed() const { return tasks::parse_task(task); }
};

void add_task_positional(CLI::App* app, std::string& task) {
  app->add_option("task", task, "ner, re, sts, nli or qa")->required()->check(CLI::IsMember(kTasks));
}

// --- commands ----------------------------------------------------------------------

struct PreprocessArgs {
  std::string input, out, rules, abbreviations;
};

int cmd_preprocess(const CLI::App& sub, const PreprocessArgs& a, Context& ctx) {
  Manifest m(sub, ctx, 0);
  auto raw = corpus::read_raw_jsonl(a.input);
  m.input("input", a.input);
  auto rules = corpus::RuleSet::builtin();
  if (!a.rules.empty()) {
    rules = corpus::RuleSet::load(a.rules);
    m.input("rules", a.rules);
  }
  corpus::Abbreviations abbrev;
  if (!a.abbreviations.empty()) {
    abbrev = corpus::Abbreviations::parse(read_file(a.abbreviations));
    m.input("abbreviations", a.abbreviations);
  }
  auto result = corpus::run_pipeline(raw, rules, abbrev);
  make_dir(a.out);
  std::vector<json> rows;
  for (const auto& d : result.docs) rows.push_back(corpus::to_json(d));
  write_file_atomic(fs::path(a.out) / "clean.jsonl", to_jsonl(rows));
  write_json(fs::path(a.out) / "deid_report.json", result.report.to_json());
  m.output("clean", fs::path(a.out) / "clean.jsonl");
  m.output("report", fs::path(a.out) / "deid_report.json");
  m.j["documents"] = {{"input", raw.size()}, {"output", result.docs.size()}};
  m.write(a.out);
  ctx.out << json{{"documents", result.docs.size()}, {"phi_spans", result.report.total()}}.dump() << "\n";
  return kExitOk;
}

struct DeidArgs {
  std::string input, out, rules;
};

int cmd_deidentify(const CLI::App& sub, const DeidArgs& a, Context& ctx) {
  Manifest m(sub, ctx, 0);
  auto raw = corpus::read_raw_jsonl(a.input);
  m.input("input", a.input);
  auto rules = corpus::RuleSet::builtin();
  if (!a.rules.empty()) {
    rules = corpus::RuleSet::load(a.rules);
    m.input("rules", a.rules);
  }
  corpus::DeidReport report;
  std::vector<json> rows;
  for (const auto& d : raw) {
    auto r = corpus::deidentify(d.text, rules);
    report.add(r.spans);
    json spans = json::array();
    for (const auto& s : r.spans) spans.push_back({{"category", s.category}, {"start", s.start}, {"end", s.end}});
    rows.push_back({{"id", d.id}, {"text", r.text}, {"source_tag", d.source_tag}, {"spans", spans}});
  }
  make_dir(a.out);
  write_file_atomic(fs::path(a.out) / "deidentified.jsonl", to_jsonl(rows));
  write_json(fs::path(a.out) / "deid_report.json", report.to_json());
  m.output("deidentified", fs::path(a.out) / "deidentified.jsonl");
  m.write(a.out);
  ctx.out << json{{"documents", raw.size()}, {"phi_spans", report.total()}}.dump() << "\n";
  return kExitOk;
}

struct TokenizerArgs {
  std::string corpus, out;
  std::size_t vocab_size = 8000;
};

int cmd_train_tokenizer(const CLI::App& sub, const TokenizerArgs& a, Context& ctx) {
  Manifest m(sub, ctx, 0);
  auto docs = corpus::read_clean_jsonl(a.corpus);
  m.input("corpus", a.corpus);
  std::vector<std::string> lines;
  for (const auto& d : docs) {
    for (const auto& s : d.sentences) {
      std::string line;
      for (const auto& w : s) {
        if (!line.empty()) line += ' ';
        line += w;
      }
      lines.push_back(std::move(line));
    }
  }
  auto vocab = bpe::train_bpe(lines, a.vocab_size);
  make_dir(a.out);
  write_file_atomic(fs::path(a.out) / "vocab.txt", vocab.serialize());
  m.output("vocab", fs::path(a.out) / "vocab.txt");
  m.j["vocab_size"] = vocab.size();
  m.write(a.out);
  ctx.out << json{{"vocab_size", vocab.size()}, {"merges", vocab.merges().size()}}.dump() << "\n";
  return kExitOk;
}

struct PretrainArgs {
  std::string corpus, vocab, out, hosts;
  ModelArgs model;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::int64_t warmup = 100;
  std::int64_t max_steps = 2000;
  std::int64_t eval_every = 50;
  std::int64_t patience = 3;
  double min_delta = 1e-3;
  double val_fraction = 0.05;
  double mask_rate = 0.15;
  std::size_t max_val_examples = 256;
  bool bert_mix = false;
  bool wall_time = false;
  std::uint64_t seed = 0;
  std::size_t model_parallel = 1;
  std::size_t data_parallel = 1;
  std::string transport = "threads";
  std::string precision = "f32";
};

void write_pretrain_outputs(const fs::path& out, const model::Encoder<float>& best, const pretrain::PretrainResult& r,
                            const std::vector<parallel::CollectiveRecord>* trace, Manifest m,
                            const std::string& tok_hash, std::uint64_t seed) {
  json meta = {{"tokenizer_hash", tok_hash},
               {"step", r.best_step},
               {"val_loss", r.best_val},
               {"seed", seed},
               {"stop_reason", r.stop_reason}};
  model::save_checkpoint(out / "checkpoint.ckpt", model::make_checkpoint(best, meta));
  write_file_atomic(out / "train_log.csv", r.log.to_csv());
  m.output("checkpoint", out / "checkpoint.ckpt");
  m.output("train_log", out / "train_log.csv");
  if (trace) {
    write_file_atomic(out / "collectives.csv", parallel::trace_csv(*trace));
    m.output("collectives", out / "collectives.csv");
  }
  m.j["result"] = {{"initial_val", r.initial_val},
                   {"initial_val_mlm", r.initial_val_mlm},
                   {"best_val", r.best_val},
                   {"best_step", r.best_step},
                   {"steps", r.steps},
                   {"stop_reason", r.stop_reason}};
  m.write(out);
}

int cmd_pretrain(const CLI::App& sub, const PretrainArgs& a, Context& ctx) {
  require_f32(a.precision);
  Manifest m(sub, ctx, a.seed);
  auto docs = corpus::read_clean_jsonl(a.corpus);
  m.input("corpus", a.corpus);
  auto vocab = load_vocab(a.vocab);
  m.input("vocab", a.vocab);
  auto cfg = a.model.resolve(vocab.size());
  m.j["model"] = model::to_json(cfg);

  pretrain::PretrainConfig pc;
  pc.batch = a.batch;
  pc.adam.lr = a.lr;
  pc.adam.warmup_steps = a.warmup;
  pc.max_steps = a.max_steps;
  pc.eval_every = a.eval_every;
  pc.patience = a.patience;
  pc.min_delta = a.min_delta;
  pc.val_fraction = a.val_fraction;
  pc.mask_rate = a.mask_rate;
  pc.max_val_examples = a.max_val_examples;
  pc.bert_mix = a.bert_mix;
  pc.wall_time = a.wall_time;
  pc.seed = a.seed;
  pc.stop = &stop_flag();

  auto split = pretrain::split_corpus(pretrain::tokenize_documents(docs, vocab), a.val_fraction);
  if (split.train.empty()) throw ValueError("the corpus has no training documents after the validation split");
  auto enc = model::build_encoder<float>(cfg, a.seed);
  fs::path out(a.out);
  make_dir(out);
  std::string tok = vocab_hash(vocab);

  if (a.model_parallel * a.data_parallel == 1) {
    if (!a.hosts.empty()) throw ConfigError("--hosts needs --model-parallel or --data-parallel above 1");
    auto r = pretrain::pretrain(enc, split, vocab, pc);
    write_pretrain_outputs(out, r.best, r, nullptr, m, tok, a.seed);
  } else {
    parallel::LaunchOptions lo;
    lo.model_parallel = a.model_parallel;
    lo.data_parallel = a.data_parallel;
    lo.transport = a.transport == "sockets" ? parallel::Transport::processes : parallel::Transport::threads;
    if (!a.hosts.empty()) {
      if (lo.transport != parallel::Transport::processes) throw ConfigError("--hosts needs --transport sockets");
      auto hosts = parallel::parse_hosts(read_file(a.hosts));
      if (hosts.empty()) throw ConfigError(a.hosts + " lists no hosts");
      lo.hub = hosts.front();
      m.input("hosts", a.hosts);
    }
    auto plan = parallel::ShardPlan::make(cfg, a.model_parallel);
    auto shards = parallel::shard_model(enc, plan);
    parallel::launch_workers(lo, [&](parallel::WorkerContext& w) {
      auto mine = shards[w.shard].clone();
      parallel::TensorParallelHooks<float> hooks(*w.model_group);
      pretrain::ParallelContext par{&hooks, w.data_group, w.world, w.model_group};
      auto r = pretrain::pretrain(mine, split, vocab, pc, par);
      auto full = parallel::gather_full_model(r.best, plan, *w.model_group);
      if (w.world_rank == 0) {
        auto trace = w.model_group->trace();
        write_pretrain_outputs(out, full, r, &trace, m, tok, a.seed);
      }
    });
  }
  json summary = json::parse(read_file(out / "manifest.json")).at("result");
  ctx.out << summary.dump() << "\n";
  return stop_flag().load() ? kExitInterrupted : kExitOk;
}

struct FinetuneArgs {
  std::string task, checkpoint, vocab, train, out, ner_mode = "unified", precision = "f32";
  std::size_t epochs = 80, batch = 8, max_seq_len = 0;
  double lr = 1e-3;
  std::int64_t warmup = 10;
  std::uint64_t seed = 0;
  tasks::QaWindowing qa;
};

template <typename E>
json score(const tasks::FineTuned& ft, const bpe::Vocabulary& v, const std::vector<E>& data);

template <>
json score(const tasks::FineTuned& ft, const bpe::Vocabulary& v, const std::vector<tasks::NerExample>& d) {
  return tasks::score_ner(d, tasks::predict_ner(ft, v, d));
}
template <>
json score(const tasks::FineTuned& ft, const bpe::Vocabulary& v, const std::vector<tasks::ReExample>& d) {
  return tasks::score_re(d, tasks::predict_re(ft, v, d));
}
template <>
json score(const tasks::FineTuned& ft, const bpe::Vocabulary& v, const std::vector<tasks::StsExample>& d) {
  return tasks::score_sts(d, tasks::predict_sts(ft, v, d));
}
template <>
json score(const tasks::FineTuned& ft, const bpe::Vocabulary& v, const std::vector<tasks::NliExample>& d) {
  return tasks::score_nli(d, tasks::predict_nli(ft, v, d));
}
template <>
json score(const tasks::FineTuned& ft, const bpe::Vocabulary& v, const std::vector<tasks::QaExample>& d) {
  return tasks::score_qa(d, tasks::predict_qa(ft, v, d));
}

std::vector<json> predictions(tasks::Task task, const tasks::FineTuned& ft, const bpe::Vocabulary& v,
                              const fs::path& data) {
  std::vector<json> rows;
  auto probs = [](const tasks::ClassPrediction& p, const std::vector<std::string>& labels) {
    json j = json::object();
    for (std::size_t i = 0; i < labels.size(); ++i) j[labels[i]] = p.probabilities[i];
    return j;
  };
  switch (task) {
    case tasks::Task::kNer: {
      auto d = tasks::read_ner(data);
      auto pred = tasks::predict_ner(ft, v, d);
      for (std::size_t i = 0; i < d.size(); ++i) {
        json spans = json::array();
        for (const auto& s : pred[i]) spans.push_back({s.start, s.end, s.category});
        json row = {{"tokens", d[i].tokens}, {"spans", spans}};
        try {
          row["labels"] = tasks::bio_encode(d[i].tokens.size(), pred[i]);
        } catch (const ValueError&) {
          // Per-category predictions may overlap; only spans are reported then.
        }
        rows.push_back(std::move(row));
      }
      break;
    }
    case tasks::Task::kRe: {
      auto d = tasks::read_re(data);
      auto pred = tasks::predict_re(ft, v, d);
      for (std::size_t i = 0; i < d.size(); ++i) {
        json row = tasks::to_json(d[i]);
        row["label"] = pred[i].label;
        row["probabilities"] = probs(pred[i], ft.models[0].labels);
        rows.push_back(std::move(row));
      }
      break;
    }
    case tasks::Task::kSts: {
      auto d = tasks::read_sts(data);
      auto pred = tasks::predict_sts(ft, v, d);
      for (std::size_t i = 0; i < d.size(); ++i) rows.push_back({{"a", d[i].a}, {"b", d[i].b}, {"score", pred[i]}});
      break;
    }
    case tasks::Task::kNli: {
      auto d = tasks::read_nli(data);
      auto pred = tasks::predict_nli(ft, v, d);
      for (std::size_t i = 0; i < d.size(); ++i) {
        rows.push_back({{"premise", d[i].premise},
                        {"hypothesis", d[i].hypothesis},
                        {"label", pred[i].label},
                        {"probabilities", probs(pred[i], ft.models[0].labels)}});
      }
      break;
    }
    case tasks::Task::kQa: {
      auto d = tasks::read_qa(data);
      auto pred = tasks::predict_qa(ft, v, d);
      for (std::size_t i = 0; i < d.size(); ++i) {
        json answers = json::array();
        if (pred[i].found) answers.push_back({{"start", pred[i].start}, {"text", pred[i].text}, {"score", pred[i].score}});
        rows.push_back({{"question", d[i].question}, {"context", d[i].context}, {"answers", answers}});
      }
      break;
    }
  }
  return rows;
}

json evaluate_file(tasks::Task task, const tasks::FineTuned& ft, const bpe::Vocabulary& v, const fs::path& data) {
  switch (task) {
    case tasks::Task::kNer: return score(ft, v, tasks::read_ner(data));
    case tasks::Task::kRe: return score(ft, v, tasks::read_re(data));
    case tasks::Task::kSts: return score(ft, v, tasks::read_sts(data));
    case tasks::Task::kNli: return score(ft, v, tasks::read_nli(data));
    case tasks::Task::kQa: return score(ft, v, tasks::read_qa(data));
  }
  throw ConfigError("unknown task");
}

void check_tokenizer(const json& metadata, const std::string& tok, const std::string& what) {
  if (metadata.contains("tokenizer_hash") && metadata["tokenizer_hash"] != tok) {
    throw ConfigError("the vocabulary does not match the tokenizer " + what + " was trained with");
  }
}

int cmd_finetune(const CLI::App& sub, const FinetuneArgs& a, Context& ctx) {
  require_f32(a.precision);
  Manifest m(sub, ctx, a.seed);
  tasks::Task task = tasks::parse_task(a.task);
  auto vocab = load_vocab(a.vocab);
  m.input("vocab", a.vocab);
  auto ckpt = model::load_checkpoint(a.checkpoint);
  m.input("checkpoint", a.checkpoint);
  m.input("train", a.train);
  std::string tok = vocab_hash(vocab);
  check_tokenizer(ckpt.metadata, tok, "the checkpoint");
  if (ckpt.cfg.vocab_size != vocab.size()) {
    throw ConfigError("checkpoint vocabulary has " + std::to_string(ckpt.cfg.vocab_size) + " entries, the tokenizer " +
                      std::to_string(vocab.size()));
  }
  auto enc = model::encoder_from_checkpoint<float>(ckpt);

  tasks::FinetuneConfig fc;
  fc.epochs = a.epochs;
  fc.batch = a.batch;
  fc.adam.lr = a.lr;
  fc.adam.warmup_steps = a.warmup;
  fc.seed = a.seed;
  fc.max_seq_len = a.max_seq_len;
  fc.ner_mode = a.ner_mode == "unified" ? tasks::NerMode::kUnified : tasks::NerMode::kPerCategory;
  fc.qa = a.qa;
  fc.stop = &stop_flag();
  m.j["finetune"] = fc.to_json();

  tasks::FineTuned ft;
  json train_metrics;
  switch (task) {
    case tasks::Task::kNer: {
      auto d = tasks::read_ner(a.train);
      ft = tasks::finetune_ner(enc, vocab, d, fc);
      train_metrics = score(ft, vocab, d);
      break;
    }
    case tasks::Task::kRe: {
      auto d = tasks::read_re(a.train);
      ft = tasks::finetune_re(enc, vocab, d, fc);
      train_metrics = score(ft, vocab, d);
      break;
    }
    case tasks::Task::kSts: {
      auto d = tasks::read_sts(a.train);
      ft = tasks::finetune_sts(enc, vocab, d, fc);
      train_metrics = score(ft, vocab, d);
      break;
    }
    case tasks::Task::kNli: {
      auto d = tasks::read_nli(a.train);
      ft = tasks::finetune_nli(enc, vocab, d, fc);
      train_metrics = score(ft, vocab, d);
      break;
    }
    case tasks::Task::kQa: {
      auto d = tasks::read_qa(a.train);
      ft = tasks::finetune_qa(enc, vocab, d, fc);
      train_metrics = score(ft, vocab, d);
      break;
    }
  }
  fs::path out(a.out);
  make_dir(out);
  json meta = {{"tokenizer_hash", tok}, {"seed", a.seed}, {"task", a.task}, {"base_checkpoint", file_hash(a.checkpoint)}};
  tasks::save_finetuned(out / "model", ft, meta);
  write_json(out / "train_metrics.json", train_metrics);
  m.output("model", out / "model");
  m.output("train_metrics", out / "train_metrics.json");
  m.j["epoch_losses"] = ft.epoch_losses;
  m.write(out);
  ctx.out << train_metrics.dump() << "\n";
  return stop_flag().load() ? kExitInterrupted : kExitOk;
}

// Reading the dataset before the model reports a schema mismatch first.
void check_schema(tasks::Task task, const fs::path& data) {
  switch (task) {
    case tasks::Task::kNer: (void)tasks::read_ner(data); break;
    case tasks::Task::kRe: (void)tasks::read_re(data); break;
    case tasks::Task::kSts: (void)tasks::read_sts(data); break;
    case tasks::Task::kNli: (void)tasks::read_nli(data); break;
    case tasks::Task::kQa: (void)tasks::read_qa(data); break;
  }
}

tasks::FineTuned load_model_for(const TaskArgs& a, const bpe::Vocabulary& vocab) {
  auto ft = tasks::load_finetuned(a.model_dir);
  if (ft.task != a.parsed()) {
    throw ConfigError(a.model_dir + " was fine-tuned for " + std::string(tasks::task_name(ft.task)) + ", not " + a.task);
  }
  auto task_json = json::parse(read_file(fs::path(a.model_dir) / "task.json"));
  check_tokenizer(task_json.value("metadata", json::object()), vocab_hash(vocab), "the model");
  return ft;
}

int cmd_evaluate(const CLI::App& sub, const TaskArgs& a, Context& ctx) {
  Manifest m(sub, ctx, 0);
  auto vocab = load_vocab(a.vocab);
  m.input("vocab", a.vocab);
  m.input("model", a.model_dir);
  m.input("data", a.data);
  check_schema(a.parsed(), a.data);
  auto ft = load_model_for(a, vocab);
  json metrics = evaluate_file(a.parsed(), ft, vocab, a.data);
  if (!a.out.empty()) {
    make_dir(a.out);
    write_json(fs::path(a.out) / "metrics.json", metrics);
    m.output("metrics", fs::path(a.out) / "metrics.json");
    m.write(a.out);
  }
  ctx.out << metrics.dump() << "\n";
  return kExitOk;
}

int cmd_predict(const CLI::App& sub, const TaskArgs& a, Context& ctx) {
  Manifest m(sub, ctx, 0);
  auto vocab = load_vocab(a.vocab);
  m.input("vocab", a.vocab);
  m.input("model", a.model_dir);
  m.input("data", a.data);
  check_schema(a.parsed(), a.data);
  auto ft = load_model_for(a, vocab);
  auto rows = predictions(a.parsed(), ft, vocab, a.data);
  make_dir(a.out);
  write_file_atomic(fs::path(a.out) / "predictions.jsonl", to_jsonl(rows));
  m.output("predictions", fs::path(a.out) / "predictions.jsonl");
  m.write(a.out);
  ctx.out << json{{"predictions", rows.size()}}.dump() << "\n";
  return kExitOk;
}

json describe_checkpoint(const model::Checkpoint& c) {
  std::uint64_t scalars = 0;
  for (const auto& [name, t] : c.tensors) scalars += t.numel();
  return {{"config", model::to_json(c.cfg)},
          {"metadata", c.metadata},
          {"tensors", c.tensors.size()},
          {"parameters", scalars},
          {"encoder_parameters", model::count_params(c.cfg, true)}};
}

int cmd_inspect(const std::string& path, Context& ctx) {
  fs::path p(path);
  json info;
  if (fs::is_directory(p)) {
    info = json::parse(read_file(p / "task.json"));
    json models = json::array();
    for (const auto& entry : info.at("models")) {
      json d = describe_checkpoint(model::load_checkpoint(p / entry.at("file").get<std::string>()));
      d["file"] = entry.at("file");
      d["labels"] = entry.at("labels");
      models.push_back(d);
    }
    info["models"] = models;
  } else {
    info = describe_checkpoint(model::load_checkpoint(p));
  }
  info["hash"] = input_hash(p);
  ctx.out << info.dump(2) << "\n";
  return kExitOk;
}

struct FixtureArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t docs = 1000, phi_docs = 100, examples = 32;
};

int cmd_gen_fixtures(const CLI::App& sub, const FixtureArgs& a, Context& ctx) {
  Manifest m(sub, ctx, a.seed);
  fs::path out(a.out);
  make_dir(out);
  auto emit = [&](const std::string& name, const std::vector<json>& rows) {
    write_file_atomic(out / name, to_jsonl(rows));
    m.output(name, out / name);
  };
  {
    std::vector<json> rows;
    for (const auto& d : pretrain::synthetic_clinical_notes(a.docs, a.seed)) {
      rows.push_back(corpus::to_json(corpus::RawDocument{d.id, corpus::detokenize(d), "synthetic"}));
    }
    emit("notes.jsonl", rows);
  }
  {
    std::vector<json> docs, gold;
    for (const auto& d : corpus::synthetic_phi_corpus(a.phi_docs, a.seed)) {
      docs.push_back(corpus::to_json(d.doc));
      json spans = json::array();
      for (const auto& s : d.gold) spans.push_back({{"category", s.category}, {"start", s.start}, {"end", s.end}});
      gold.push_back({{"id", d.doc.id}, {"spans", spans}});
    }
    emit("phi_notes.jsonl", docs);
    emit("phi_gold.jsonl", gold);
  }
  auto rows_of = [](const auto& examples) {
    std::vector<json> rows;
    for (const auto& e : examples) rows.push_back(tasks::to_json(e));
    return rows;
  };
  emit("ner.jsonl", rows_of(tasks::synthetic_ner(a.examples, a.seed + 1)));
  emit("re.jsonl", rows_of(tasks::synthetic_re(a.examples, a.seed + 2)));
  emit("sts.jsonl", rows_of(tasks::synthetic_sts(a.examples, a.seed + 3)));
  emit("nli.jsonl", rows_of(tasks::synthetic_nli(a.examples, a.seed + 4)));
  emit("qa.jsonl", rows_of(tasks::synthetic_qa(a.examples, a.seed + 5)));
  m.write(out);
  ctx.out << json{{"out", a.out}, {"files", m.j["outputs"].size()}}.dump() << "\n";
  return kExitOk;
}

bool given(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Removes --config PATH from args and appends its `key = value` lines as
// --key=value for every option not already on the command line, so flags win
// over the file and the file wins over defaults. Lines under a [section]
// header apply only to the subcommand of that name; lines before any header
// apply to every subcommand that has the option.
std::vector<std::string> expand_config(CLI::App& app, const std::vector<std::string>& raw, std::string& path) {
  std::vector<std::string> args;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == "--config") {
      if (i + 1 == raw.size()) throw ConfigError("--config needs a file");
      path = raw[++i];
    } else if (raw[i].rfind("--config=", 0) == 0) {
      path = raw[i].substr(9);
    } else {
      args.push_back(raw[i]);
    }
  }
  if (path.empty()) return args;
  CLI::App* sub = nullptr;
  for (const auto& a : args) {
    if ((sub = app.get_subcommand_no_throw(a))) break;
  }
  if (!sub) return args;
  std::istringstream in(read_file(path));
  std::string line, section;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    if (!section.empty() && section != sub->get_name()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(n) + ": expected key = value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    std::string flag = "--" + key;
    if (!sub->get_option_no_throw(flag)) {
      // Keys outside a section may belong to other subcommands.
      const auto subs = app.get_subcommands([](CLI::App*) { return true; });
      const bool elsewhere = section.empty() && std::any_of(subs.begin(), subs.end(), [&](CLI::App* other) {
                               return other->get_option_no_throw(flag) != nullptr;
                             });
      if (elsewhere) continue;
      throw ConfigError(path + ":" + std::to_string(n) + ": " + sub->get_name() + " has no option " + flag);
    }
    if (given(args, flag)) continue;
    args.push_back(flag + "=" + value);
  }
  return args;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Clinical language model toolkit: corpus preparation, tokenizer and encoder pretraining, task "
               "fine-tuning and evaluation.",
               "clinlm"};
  app.set_version_flag("--version", version());
  std::string config_path;
  app.add_option("--config", config_path, "File of key = value option defaults; [name] sections per subcommand");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  PreprocessArgs pre;
  auto* s_pre = app.add_subcommand("preprocess", "Normalize, de-identify and sentence-split raw notes");
  s_pre->add_option("--input", pre.input, "Raw notes JSONL {id, text, source_tag}")->required()->check(CLI::ExistingFile);
  s_pre->add_option("--out", pre.out, "Output directory")->required();
  s_pre->add_option("--rules", pre.rules, "Custom PHI rule file")->check(CLI::ExistingFile);
  s_pre->add_option("--abbreviations", pre.abbreviations, "Abbreviation list")->check(CLI::ExistingFile);

  DeidArgs deid;
  auto* s_deid = app.add_subcommand("deidentify", "Replace PHI with category tokens");
  s_deid->add_option("--input", deid.input, "Raw notes JSONL")->required()->check(CLI::ExistingFile);
  s_deid->add_option("--out", deid.out, "Output directory")->required();
  s_deid->add_option("--rules", deid.rules, "Custom PHI rule file")->check(CLI::ExistingFile);

  TokenizerArgs tok;
  auto* s_tok = app.add_subcommand("train-tokenizer", "Learn a BPE vocabulary from a clean corpus");
  s_tok->add_option("--corpus", tok.corpus, "Clean corpus JSONL")->required()->check(CLI::ExistingFile);
  s_tok->add_option("--vocab-size", tok.vocab_size, "Target vocabulary size")->check(CLI::PositiveNumber);
  s_tok->add_option("--out", tok.out, "Output directory")->required();

  PretrainArgs pt;
  auto* s_pt = app.add_subcommand("pretrain", "Pretrain an encoder with MLM and sentence-order prediction");
  s_pt->add_option("--corpus", pt.corpus, "Clean corpus JSONL")->required()->check(CLI::ExistingFile);
  s_pt->add_option("--vocab", pt.vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  s_pt->add_option("--out", pt.out, "Output directory")->required();
  pt.model.add(s_pt);
  s_pt->add_option("--batch", pt.batch, "Global batch size")->check(CLI::PositiveNumber);
  s_pt->add_option("--lr", pt.lr, "Peak learning rate")->check(CLI::PositiveNumber);
  s_pt->add_option("--warmup", pt.warmup, "Linear warmup steps")->check(CLI::NonNegativeNumber);
  s_pt->add_option("--max-steps", pt.max_steps, "Step budget")->check(CLI::PositiveNumber);
  s_pt->add_option("--eval-every", pt.eval_every, "Steps between validation passes")->check(CLI::PositiveNumber);
  s_pt->add_option("--patience", pt.patience, "Evaluations without improvement before stopping")
      ->check(CLI::PositiveNumber);
  s_pt->add_option("--min-delta", pt.min_delta, "Smallest validation gain that counts")->check(CLI::NonNegativeNumber);
  s_pt->add_option("--val-fraction", pt.val_fraction, "Share of documents held out")->check(CLI::Range(0.0, 1.0));
  s_pt->add_option("--mask-rate", pt.mask_rate, "Masked share of non-special tokens")->check(CLI::Range(0.0, 1.0));
  s_pt->add_option("--max-val-examples", pt.max_val_examples, "Validation pairs per evaluation");
  s_pt->add_flag("--bert-mix", pt.bert_mix, "Use 80/10/10 mask/random/keep replacement");
  s_pt->add_flag("--wall-time", pt.wall_time, "Record elapsed seconds in the training log");
  s_pt->add_option("--seed", pt.seed, "Random seed");
  s_pt->add_option("--model-parallel", pt.model_parallel, "Tensor-parallel workers P")->check(CLI::PositiveNumber);
  s_pt->add_option("--data-parallel", pt.data_parallel, "Data-parallel replicas R")->check(CLI::PositiveNumber);
  s_pt->add_option("--transport", pt.transport, "Worker transport")->check(CLI::IsMember({"threads", "sockets"}));
  s_pt->add_option("--hosts", pt.hosts, "host:port per line; the first is the rendezvous")
      ->check(CLI::ExistingFile);
  s_pt->add_option("--precision", pt.precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));

  FinetuneArgs ftn;
  auto* s_ft = app.add_subcommand("finetune", "Fine-tune a task head on a pretrained checkpoint");
  add_task_positional(s_ft, ftn.task);
  s_ft->add_option("--checkpoint", ftn.checkpoint, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);
  s_ft->add_option("--vocab", ftn.vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  s_ft->add_option("--train", ftn.train, "Training JSONL")->required()->check(CLI::ExistingFile);
  s_ft->add_option("--out", ftn.out, "Output directory")->required();
  s_ft->add_option("--epochs", ftn.epochs, "Passes over the training set")->check(CLI::PositiveNumber);
  s_ft->add_option("--batch", ftn.batch, "Batch size")->check(CLI::PositiveNumber);
  s_ft->add_option("--lr", ftn.lr, "Peak learning rate")->check(CLI::PositiveNumber);
  s_ft->add_option("--warmup", ftn.warmup, "Linear warmup steps")->check(CLI::NonNegativeNumber);
  s_ft->add_option("--seed", ftn.seed, "Random seed");
  s_ft->add_option("--max-seq-len", ftn.max_seq_len, "Packed length limit; 0 uses the encoder's");
  s_ft->add_option("--ner-mode", ftn.ner_mode, "One tagger or one per category")
      ->check(CLI::IsMember({"unified", "per-category"}));
  s_ft->add_option("--qa-max-question", ftn.qa.max_question, "Question tokens kept");
  s_ft->add_option("--qa-window", ftn.qa.window, "Context tokens per window")->check(CLI::PositiveNumber);
  s_ft->add_option("--qa-stride", ftn.qa.stride, "Offset between window starts")->check(CLI::PositiveNumber);
  s_ft->add_option("--qa-max-answer", ftn.qa.max_answer, "Longest answer in tokens")->check(CLI::PositiveNumber);
  s_ft->add_option("--precision", ftn.precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));

  TaskArgs ev, pr;
  auto* s_ev = app.add_subcommand("evaluate", "Score a fine-tuned model on a labeled dataset");
  auto* s_pr = app.add_subcommand("predict", "Write predictions for a dataset");
  for (auto [sub, a] : {std::pair{s_ev, &ev}, std::pair{s_pr, &pr}}) {
    add_task_positional(sub, a->task);
    sub->add_option("--model", a->model_dir, "Fine-tuned model directory")->required()->check(CLI::ExistingDirectory);
    sub->add_option("--vocab", a->vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
    sub->add_option("--data", a->data, "Dataset JSONL")->required()->check(CLI::ExistingFile);
  }
  s_ev->add_option("--out", ev.out, "Directory for metrics.json");
  s_pr->add_option("--out", pr.out, "Directory for predictions.jsonl")->required();

  std::string inspect_path;
  auto* s_in = app.add_subcommand("inspect-checkpoint", "Print a checkpoint's configuration and metadata");
  s_in->add_option("path", inspect_path, "Checkpoint file or fine-tuned model directory")
      ->required()
      ->check(CLI::ExistingPath);

  FixtureArgs fx;
  auto* s_fx = app.add_subcommand("gen-fixtures", "Write synthetic corpora and task datasets");
  s_fx->add_option("--out", fx.out, "Output directory")->required();
  s_fx->add_option("--seed", fx.seed, "Random seed");
  s_fx->add_option("--docs", fx.docs, "Synthetic clinical notes")->check(CLI::PositiveNumber);
  s_fx->add_option("--phi-docs", fx.phi_docs, "Notes with injected PHI")->check(CLI::PositiveNumber);
  s_fx->add_option("--examples", fx.examples, "Examples per task dataset")->check(CLI::PositiveNumber);

  std::vector<std::string> args;
  try {
    args = expand_config(app, raw_args, config_path);
  } catch (const Error& e) {
    err << "error: " << error_kind_name(e.kind()) << ": " << e.what() << "\n";
    return kExitFailure;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    for (auto* sub : app.get_subcommands()) out << sub->help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version() << "\n";
    return kExitOk;
  } catch (const CLI::ValidationError& e) {
    err << "error: config: " << e.what() << "\n";
    return kExitFailure;
  } catch (const CLI::ConversionError& e) {
    err << "error: config: " << e.what() << "\n";
    return kExitFailure;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n";
    auto parsed = app.get_subcommands();
    err << (parsed.empty() ? app.help() : parsed.front()->help());
    return kExitUsage;
  }

  Context ctx{raw_args, config_path, out, err};
  try {
    if (s_pre->parsed()) return cmd_preprocess(*s_pre, pre, ctx);
    if (s_deid->parsed()) return cmd_deidentify(*s_deid, deid, ctx);
    if (s_tok->parsed()) return cmd_train_tokenizer(*s_tok, tok, ctx);
    if (s_pt->parsed()) return cmd_pretrain(*s_pt, pt, ctx);
    if (s_ft->parsed()) return cmd_finetune(*s_ft, ftn, ctx);
    if (s_ev->parsed()) return cmd_evaluate(*s_ev, ev, ctx);
    if (s_pr->parsed()) return cmd_predict(*s_pr, pr, ctx);
    if (s_in->parsed()) return cmd_inspect(inspect_path, ctx);
    if (s_fx->parsed()) return cmd_gen_fixtures(*s_fx, fx, ctx);
  } catch (const Error& e) {
    err << "error: " << error_kind_name(e.kind()) << ": " << e.what() << "\n";
    return kExitFailure;
  } catch (const json::exception& e) {
    err << "error: schema: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace clinlm::cli

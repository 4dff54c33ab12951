#pragma once

// Configuration, data loading, the fine-tuning loop, base-model pretraining
// and evaluation.

#include "fvqa/checkpoint.hpp"
#include "fvqa/inference.hpp"
#include "fvqa/model.hpp"
#include "fvqa/objectives.hpp"
#include "fvqa/optim.hpp"
#include "fvqa/prompt.hpp"
#include "fvqa/scenario.hpp"
#include "fvqa/synth.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fvqa {

inline constexpr const char* kVersionTag = "fvqa-0.1.0";

struct TrainConfig {
  int epochs = 5;
  int batch_size = 16;
  double lr = 3e-3;
  double weight_decay = 0.1;
  double warmup_frac = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  ObjectiveToggles toggles;
  std::uint64_t seed = 0;
  int n_v = 4;
  int n_p = 10;
  int max_seq_len = 64;
  bool qa_only = false;
  bool stop_grad_targets = false;

  void validate() const {
    if (epochs < 1) fail(Errc::ConfigInvalid, "epochs must be >= 1");
    if (batch_size < 1) fail(Errc::ConfigInvalid, "batch_size must be >= 1");
    if (!(lr > 0.0)) fail(Errc::ConfigInvalid, "lr must be > 0");
    if (weight_decay < 0.0) fail(Errc::ConfigInvalid, "weight_decay must be >= 0");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0) fail(Errc::ConfigInvalid, "warmup_frac must be in [0, 1)");
    if (!toggles.vqa) fail(Errc::ConfigInvalid, "the vqa objective is always on");
    if (n_v < 1 || n_p < 1 || max_seq_len < 1) fail(Errc::ConfigInvalid, "n_v, n_p, max_seq_len must be >= 1");
  }
};

inline std::string toggles_text(const ObjectiveToggles& t) {
  std::string s = "vqa";
  if (t.vaq) s += " vaq";
  if (t.qav) s += " qav";
  return s;
}

inline ObjectiveToggles toggles_from_text(const std::string& text) {
  ObjectiveToggles t{false, false, false};
  for (const auto& w : split_words(text)) {
    if (w == "vqa") t.vqa = true;
    else if (w == "vaq") t.vaq = true;
    else if (w == "qav") t.qav = true;
    else fail(Errc::ConfigInvalid, "unknown objective '" + w + "'");
  }
  return t;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(Errc::ConfigInvalid, "'" + key + "' expects true/false, got '" + v + "'");
}

inline TrainConfig train_config_from_key_values(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  for (const auto& [k, v] : kv) {
    auto num = [&] { return detail::to_double(k, v); };
    if (k == "epochs") c.epochs = static_cast<int>(num());
    else if (k == "batch_size") c.batch_size = static_cast<int>(num());
    else if (k == "lr") c.lr = num();
    else if (k == "weight_decay") c.weight_decay = num();
    else if (k == "warmup_frac") c.warmup_frac = num();
    else if (k == "beta1") c.beta1 = num();
    else if (k == "beta2") c.beta2 = num();
    else if (k == "objectives") c.toggles = toggles_from_text(v);
    else if (k == "seed") c.seed = static_cast<std::uint64_t>(num());
    else if (k == "n_v") c.n_v = static_cast<int>(num());
    else if (k == "n_p") c.n_p = static_cast<int>(num());
    else if (k == "max_seq_len") c.max_seq_len = static_cast<int>(num());
    else if (k == "qa_only") c.qa_only = parse_bool(k, v);
    else if (k == "stop_grad_targets") c.stop_grad_targets = parse_bool(k, v);
    else fail(Errc::ConfigInvalid, "unknown train key '" + k + "'");
  }
  c.validate();
  return c;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"warmup_frac", c.warmup_frac},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"objectives", toggles_text(c.toggles)},
          {"seed", c.seed},
          {"n_v", c.n_v},
          {"n_p", c.n_p},
          {"max_seq_len", c.max_seq_len},
          {"qa_only", c.qa_only},
          {"stop_grad_targets", c.stop_grad_targets}};
}

// --- data ----------------------------------------------------------------------

struct TrainData {
  Vocab vocab;
  std::vector<EncodedExample> train;
  std::vector<EncodedExample> val;
  std::uint64_t hash = 0;
};

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t hash_examples(const std::vector<EncodedExample>& xs, std::uint64_t h) {
  for (const auto& e : xs) {
    h = fnv1a(to_record_line(e.example), h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(e.features.data()),
                               sizeof(float) * static_cast<std::size_t>(e.features.size())),
              h);
  }
  return h;
}

inline TrainData make_train_data(Vocab vocab, const std::vector<QAExample>& train,
                                 const std::vector<Mat<float>>& train_features, const std::vector<QAExample>& val,
                                 const std::vector<Mat<float>>& val_features, std::size_t max_len) {
  TrainData d{std::move(vocab), {}, {}, 0};
  for (std::size_t i = 0; i < train.size(); ++i)
    d.train.push_back(encode_example(train[i], train_features[i], d.vocab, max_len));
  for (std::size_t i = 0; i < val.size(); ++i)
    d.val.push_back(encode_example(val[i], val_features[i], d.vocab, max_len));
  d.hash = hash_examples(d.val, hash_examples(d.train, fnv1a(std::to_string(d.vocab.size()))));
  return d;
}

inline TrainData data_from_synthetic(const Dataset& ds, const Vocab& vocab, std::size_t max_len) {
  std::vector<QAExample> tr, va;
  std::vector<Mat<float>> ftr, fva;
  for (auto i : ds.train) {
    tr.push_back(ds.examples[i].qa());
    ftr.push_back(ds.examples[i].features.values);
  }
  for (auto i : ds.val) {
    va.push_back(ds.examples[i].qa());
    fva.push_back(ds.examples[i].features.values);
  }
  return make_train_data(vocab, tr, ftr, va, fva, max_len);
}

// Reads vocab.txt, train.jsonl, val.jsonl and features/ from a dataset directory.
inline TrainData load_train_data(const std::filesystem::path& dir, std::size_t max_len) {
  if (!std::filesystem::exists(dir / "train.jsonl") || !std::filesystem::exists(dir / "val.jsonl"))
    fail(Errc::DataMissing, "dataset splits missing under " + dir.string());
  auto vocab = Vocab::load((dir / "vocab.txt").string());
  auto load_split = [&](const char* name, std::vector<QAExample>& xs, std::vector<Mat<float>>& fs) {
    xs = load_dataset((dir / name).string());
    for (const auto& ex : xs) fs.push_back(load_video(dir, ex).values);
  };
  std::vector<QAExample> tr, va;
  std::vector<Mat<float>> ftr, fva;
  load_split("train.jsonl", tr, ftr);
  load_split("val.jsonl", va, fva);
  return make_train_data(std::move(vocab), tr, ftr, va, fva, max_len);
}

// --- model setup -----------------------------------------------------------------

// Copies a (pretrained) backbone and attaches freshly initialized trainables:
// N_p adapter tokens per layer, zero gates and a new projection for d_enc inputs.
inline ModelParams<float> with_fresh_trainables(const ModelParams<float>& base, int n_p, int d_enc,
                                                std::uint64_t seed) {
  auto cfg = base.config;
  cfg.n_adapter = n_p;
  cfg.d_enc = d_enc;
  auto fresh = init_params<float>(cfg, seed);
  auto out = base;
  out.config = cfg;
  out.adapter_tokens = fresh.adapter_tokens;
  out.gates = fresh.gates;
  out.proj = fresh.proj;
  return out;
}

// --- training ----------------------------------------------------------------------

struct MetricRow {
  long long step = 0;
  int epoch = 0;
  LossBundle losses;
  double lr = 0.0;
};

inline std::string metric_line(const MetricRow& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["l_vqa"] = r.losses.l_vqa;
  j["l_vaq"] = r.losses.enabled.vaq ? nlohmann::json(r.losses.l_vaq) : nlohmann::json(nullptr);
  j["l_qav"] = r.losses.enabled.qav ? nlohmann::json(r.losses.l_qav) : nlohmann::json(nullptr);
  j["total"] = r.losses.total;
  j["lr"] = r.lr;
  return j.dump();
}

struct RunManifest {
  nlohmann::ordered_json config;
  std::string version = kVersionTag;
  std::string dataset_hash;
  std::string metrics_path;
  std::vector<std::string> checkpoint_paths;

  nlohmann::ordered_json to_json() const {
    return {{"config", config},
            {"version", version},
            {"dataset_hash", dataset_hash},
            {"metrics_path", metrics_path},
            {"checkpoint_paths", checkpoint_paths}};
  }
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::function<void(int epoch, const ModelParams<float>&)> on_epoch;
};

struct TrainResult {
  ModelParams<float> model;
  std::vector<MetricRow> metrics;
  RunManifest manifest;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Deterministic per-epoch batch order.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed,
                                                           int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0xBA7C0000ull + static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  return out;
}

// Fine-tunes the trainable set of `model` (adapters, gates, projection) with
// the enabled objectives.
inline TrainResult train(const TrainConfig& cfg, ModelParams<float> model, const TrainData& data,
                         const RunOptions& run = {}) {
  cfg.validate();
  if (data.train.empty()) fail(Errc::DataMissing, "training split is empty");
  namespace fs = std::filesystem;
  TrainResult res;
  res.manifest.config = to_json(cfg);
  res.manifest.config["model"] = config_to_json(model.config);
  res.manifest.dataset_hash = hex64(data.hash);
  std::ofstream metrics;
  if (!run.out_dir.empty()) {
    fs::create_directories(run.out_dir);
    res.manifest.metrics_path = (run.out_dir / "metrics.jsonl").string();
    for (int e = 1; e <= cfg.epochs; ++e)
      res.manifest.checkpoint_paths.push_back((run.out_dir / ("epoch_" + std::to_string(e) + ".ckpt")).string());
    std::ofstream(run.out_dir / "manifest.json") << res.manifest.to_json().dump(2) << '\n';
    metrics.open(res.manifest.metrics_path, std::ios::binary);
  }

  AdamW<float> opt({cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});
  ObjectiveOptions oo;
  oo.qa_only = cfg.qa_only;
  oo.stop_grad_targets = cfg.stop_grad_targets;
  const auto per_epoch = static_cast<long long>((data.train.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                                static_cast<std::size_t>(cfg.batch_size));
  const long long total = per_epoch * cfg.epochs;
  long long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(data.train.size(), cfg.batch_size, cfg.seed, epoch)) {
      std::vector<const EncodedExample*> batch;
      for (auto i : idx) batch.push_back(&data.train[i]);
      const double lr = warmup_cosine(step, total, cfg.lr, cfg.warmup_frac);
      auto r = flipped_step(model, batch, cfg.toggles, opt, lr, oo);
      MetricRow row{++step, epoch, r.losses, lr};
      if (metrics.is_open()) metrics << metric_line(row) << '\n';
      res.metrics.push_back(row);
    }
    if (metrics.is_open()) metrics.flush();
    if (!run.out_dir.empty())
      save_checkpoint(res.manifest.checkpoint_paths[static_cast<std::size_t>(epoch - 1)], model,
                      {{"epoch", epoch}, {"step", step}});
    if (run.on_epoch) run.on_epoch(epoch, model);
  }
  res.model = std::move(model);
  return res;
}

// --- base-model pretraining --------------------------------------------------------

struct PretrainConfig {
  int epochs = 4;
  int batch_size = 16;
  double lr = 3e-3;
  double warmup_frac = 0.05;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

// Language-model loss on every text position after SOS.
inline PromptLayout full_text_mask(PromptLayout layout) {
  for (std::size_t t = 0; t < layout.size(); ++t)
    layout.loss_mask[t] = t > 0 && layout.segments[t] != Segment::VisualPlaceholder && layout.ids[t] != kPad;
  return layout;
}

// Text documents standing in for the base model's pretraining data: scene
// descriptions whose "frames" are bags of symbol words, in both
// question-first and answer-first order, plus question/answer text alone.
struct CorpusConfig {
  int n_scene_qa = 12000;   // frames, question, answer
  int n_scene_aq = 6000;    // frames, answer, question
  int n_text = 6000;        // question and answer, no frames
  double scene_bias = 0.5;  // bias_rate of the scene documents
  double text_bias = 0.0;   // bias_rate of the text-only documents
  std::uint64_t seed = 777;
};

inline std::vector<Sample<float>> pretrain_corpus(const ScenarioSpec& spec, const Vocab& vocab,
                                                  const CorpusConfig& cc) {
  const auto n_v = static_cast<std::size_t>(spec.n_frames);
  std::vector<Sample<float>> corpus;
  auto scenes = [&](int n, std::uint64_t salt, Arrangement order) {
    if (n <= 0) return;
    auto s = spec;
    s.bias_rate = cc.scene_bias;
    for (const auto& ex : generate(s, static_cast<std::size_t>(n), derive_seed(cc.seed, salt), 0.0).examples) {
      Sample<float> doc;
      doc.layout = full_text_mask(encode_prompt(ex.qa(), order, vocab, n_v));
      doc.layout.arrangement = Arrangement::VQA;  // plain LM loss, whatever the order
      doc.frame_words = frame_words(spec, ex.trace, vocab);
      corpus.push_back(std::move(doc));
    }
  };
  scenes(cc.n_scene_qa, 1, Arrangement::VQA);
  scenes(cc.n_scene_aq, 2, Arrangement::VAQ);
  if (cc.n_text > 0) {
    auto s = spec;
    s.bias_rate = cc.text_bias;
    for (const auto& ex : generate(s, static_cast<std::size_t>(cc.n_text), derive_seed(cc.seed, 3), 0.0).examples) {
      Sample<float> doc;
      doc.layout = full_text_mask(encode_qa_only(ex.qa(), vocab));
      corpus.push_back(std::move(doc));
    }
  }
  if (corpus.empty()) fail(Errc::DataMissing, "pretraining corpus is empty");
  return corpus;
}

// Trains the backbone (everything except adapters, gates and projection) as a
// plain language model on the given samples; frames, if any, are bags of word
// ids embedded with the model's own token table.
inline ModelParams<float> pretrain_backbone(ModelParams<float> model, const std::vector<Sample<float>>& corpus,
                                            const PretrainConfig& cfg,
                                            const std::function<void(int, double)>& on_epoch = {}) {
  if (corpus.empty()) fail(Errc::DataMissing, "pretraining corpus is empty");
  AdamW<float> opt({0.9, 0.95, 1e-8, cfg.weight_decay});
  ObjectiveOptions oo;
  oo.adapters_on = false;
  const auto per_epoch = static_cast<long long>((corpus.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                                static_cast<std::size_t>(cfg.batch_size));
  const long long total = per_epoch * cfg.epochs;
  long long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double sum = 0.0;
    for (const auto& idx : epoch_batches(corpus.size(), cfg.batch_size, cfg.seed ^ 0x9E37ull, epoch)) {
      auto grad = zeros_like(model, GradScope::Backbone);
      const float w = 1.0f / static_cast<float>(idx.size());
      for (auto i : idx) sum += sample_objective(model, corpus[i], oo, &grad, w, GradScope::Backbone);
      opt.step(model, grad, warmup_cosine(step++, total, cfg.lr, cfg.warmup_frac));
    }
    if (on_epoch) on_epoch(epoch, sum / static_cast<double>(corpus.size()));
  }
  return model;
}

// --- evaluation ----------------------------------------------------------------------

struct EvalResult {
  struct Cell {
    std::size_t correct = 0, total = 0;
    double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  };
  Cell overall;
  std::map<std::string, Cell> per_qtype;
  std::vector<Prediction> predictions;

  double accuracy() const { return overall.accuracy(); }
};

// Accuracy of an arbitrary predictor (index per example).
inline EvalResult evaluate_with(const std::vector<const QAExample*>& xs,
                                const std::function<Prediction(std::size_t)>& predictor) {
  EvalResult r;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto p = predictor(i);
    const bool ok = p.index == xs[i]->answer_idx;
    r.overall.correct += ok;
    ++r.overall.total;
    auto& cell = r.per_qtype[xs[i]->qtype];
    cell.correct += ok;
    ++cell.total;
    r.predictions.push_back(std::move(p));
  }
  return r;
}

inline EvalResult evaluate(const ModelParams<float>& model, const std::vector<EncodedExample>& split,
                           const Vocab& vocab, PredictMode mode = PredictMode::VQA) {
  std::vector<const QAExample*> xs;
  for (const auto& e : split) xs.push_back(&e.example);
  return evaluate_with(xs, [&](std::size_t i) {
    return predict(model, split[i].example, split[i].features, vocab, mode);
  });
}

inline ModelParams<float> load_model_for_eval(const std::string& path) {
  try {
    return load_checkpoint(path).model;
  } catch (const Error& e) {
    if (e.code() == Errc::Corrupt || e.code() == Errc::VersionMismatch)
      fail(Errc::CheckpointCorrupt, e.what());
    throw;
  }
}

inline std::filesystem::path output_root() {
  if (const char* env = std::getenv("FVQA_OUT")) return env;
  return "runs";
}

}  // namespace fvqa

// fvqa: command-line driver.
//
//   fvqa gen-data     --out DIR [--spec FILE] [--n N] [--seed S]
//   fvqa pretrain     --data DIR --out FILE [model/corpus options]
//   fvqa train        --data DIR --base FILE [--config FILE] [--out DIR]
//   fvqa eval         --data DIR --ckpt FILE [--qa-only] [--log FILE]
//   fvqa bias-report  --vqa LOG --qa LOG --out PREFIX
//   fvqa features inspect FILE
//
// Relative output paths are placed under $FVQA_OUT (default ./runs).
// Exit status: 0 ok, 1 usage or configuration error, 2 runtime failure.

#include "fvqa/bias.hpp"
#include "fvqa/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace fvqa;

namespace {

fs::path under_root(const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : output_root() / path;
}

ScenarioSpec scenario_of(const fs::path& data_dir) {
  const auto file = data_dir / "scenario.txt";
  if (!fs::exists(file)) return ScenarioSpec::defaults();
  return scenario_from_key_values(read_key_value_file(file.string()));
}

void print_eval(const EvalResult& r) {
  std::printf("accuracy %.4f (%zu/%zu)\n", r.accuracy(), r.overall.correct, r.overall.total);
  for (const auto& [k, c] : r.per_qtype) std::printf("  %-12s %.4f (%zu/%zu)\n", k.c_str(), c.accuracy(), c.correct, c.total);
}

int gen_data(const std::string& spec_file, std::size_t n, std::uint64_t seed, const std::string& out) {
  std::map<std::string, std::string> kv;
  if (!spec_file.empty()) kv = read_key_value_file(spec_file);
  const auto spec = scenario_from_key_values(kv);
  const auto dir = under_root(out);
  const auto ds = generate(spec, n, seed);
  write_dataset(dir, spec, ds);
  std::ofstream os(dir / "scenario.txt");
  for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  std::printf("wrote %zu examples (%zu train / %zu val) to %s\n", ds.examples.size(), ds.train.size(),
              ds.val.size(), dir.string().c_str());
  return 0;
}

struct PretrainArgs {
  std::string data, out;
  ModelConfig model;
  PretrainConfig run;
  CorpusConfig corpus;
};

int pretrain(PretrainArgs a) {
  const auto dir = fs::path(a.data);
  const auto spec = scenario_of(dir);
  const auto vocab = Vocab::load((dir / "vocab.txt").string());
  a.model.vocab_size = static_cast<int>(vocab.size());
  a.model.d_enc = spec.d_enc;
  a.model.validate();
  const auto corpus = pretrain_corpus(spec, vocab, a.corpus);
  std::printf("pretraining on %zu documents\n", corpus.size());
  const auto base = pretrain_backbone(init_params<float>(a.model, a.run.seed), corpus, a.run, [](int e, double loss) {
    std::printf("epoch %d loss %.4f\n", e, loss);
    std::fflush(stdout);
  });
  const auto out = under_root(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(out.string(), base, {{"kind", "base"}});
  std::printf("saved %s\n", out.string().c_str());
  return 0;
}

int train_cmd(const std::string& data, const std::string& base_path, const std::string& config, const std::string& out) {
  TrainConfig cfg;
  if (!config.empty()) cfg = train_config_from_key_values(read_key_value_file(config));
  cfg.validate();
  const auto td = load_train_data(data, static_cast<std::size_t>(cfg.max_seq_len));
  const auto base = load_model_for_eval(base_path);
  if (base.config.vocab_size != static_cast<int>(td.vocab.size()))
    fail(Errc::ConfigInvalid, "base model vocabulary does not match the dataset");
  if (td.train.empty()) fail(Errc::DataMissing, "training split is empty");
  const int d_enc = static_cast<int>(td.train.front().features.cols());
  const auto model = with_fresh_trainables(base, cfg.n_p, d_enc, derive_seed(cfg.seed, 5));
  const auto dir = under_root(out);
  RunOptions run{dir, [&](int epoch, const ModelParams<float>&) {
                   std::printf("epoch %d done\n", epoch);
                   std::fflush(stdout);
                 }};
  const auto res = train(cfg, model, td, run);
  std::printf("trainable parameters %lld\n", static_cast<long long>(res.model.config.trainable_count()));
  print_eval(evaluate(res.model, td.val, td.vocab, cfg.qa_only ? PredictMode::QA_only : PredictMode::VQA));
  std::printf("run directory %s\n", dir.string().c_str());
  return 0;
}

int eval_cmd(const std::string& data, const std::string& ckpt, bool qa_only, const std::string& split,
             const std::string& log) {
  const auto model = load_model_for_eval(ckpt);
  const auto td = load_train_data(data, static_cast<std::size_t>(model.config.max_seq_len));
  const auto& xs = split == "train" ? td.train : td.val;
  const auto mode = qa_only ? PredictMode::QA_only : PredictMode::VQA;
  const auto r = evaluate(model, xs, td.vocab, mode);
  print_eval(r);
  if (!log.empty()) {
    std::vector<PredictionRecord> recs;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      PredictionRecord rec;
      rec.id = xs[i].example.id;
      rec.qtype = xs[i].example.qtype;
      rec.y_true = xs[i].example.answer_idx;
      (qa_only ? rec.y_qa : rec.y_vqa) = r.predictions[i].index;
      (qa_only ? rec.scores_qa : rec.scores_vqa) = r.predictions[i].scores;
      recs.push_back(std::move(rec));
    }
    const auto path = under_root(log);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_predictions(path.string(), recs);
    std::printf("wrote %s\n", path.string().c_str());
  }
  return 0;
}

int bias_cmd(const std::string& vqa_log, const std::string& qa_log, const std::string& out) {
  const auto recs = join_predictions(load_predictions(vqa_log), load_predictions(qa_log));
  const auto rep = bias_report(recs);
  const auto text = format_report(rep);
  std::fputs(text.c_str(), stdout);
  const auto prefix = under_root(out);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  std::ofstream(prefix.string() + ".txt") << text;
  std::ofstream(prefix.string() + ".json") << to_json(rep).dump(2) << '\n';
  return 0;
}

int inspect(const std::string& file) {
  const auto x = load_features(file);
  std::printf("%s: %lld frames x %lld dims\n", file.c_str(), static_cast<long long>(x.frames()),
              static_cast<long long>(x.dim()));
  for (Eigen::Index t = 0; t < x.frames(); ++t) {
    const auto row = x.values.row(t);
    std::printf("  frame %lld: min %.4f max %.4f mean %.4f norm %.4f\n", static_cast<long long>(t), row.minCoeff(),
                row.maxCoeff(), row.mean(), row.norm());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flipped-objective video QA on a miniature language model"};
  app.require_subcommand(1);

  std::string spec_file, out = "data";
  std::size_t n = 6000;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic video QA dataset");
  gen->add_option("--spec", spec_file, "Scenario file of key = value lines")->check(CLI::ExistingFile);
  gen->add_option("--n", n, "Number of examples");
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--out", out, "Output directory");

  PretrainArgs pa;
  pa.out = "base.ckpt";
  auto* pre = app.add_subcommand("pretrain", "Pretrain the frozen base language model");
  pre->add_option("--data", pa.data, "Dataset directory (vocabulary and scenario)")->required();
  pre->add_option("--out", pa.out, "Checkpoint path");
  pre->add_option("--d-model", pa.model.d_model);
  pre->add_option("--layers", pa.model.n_layers);
  pre->add_option("--heads", pa.model.n_heads);
  pre->add_option("--max-seq-len", pa.model.max_seq_len);
  pre->add_option("--epochs", pa.run.epochs);
  pre->add_option("--lr", pa.run.lr);
  pre->add_option("--seed", pa.run.seed);
  pre->add_option("--scene-qa", pa.corpus.n_scene_qa, "Scene documents, question first");
  pre->add_option("--scene-aq", pa.corpus.n_scene_aq, "Scene documents, answer first");
  pre->add_option("--text", pa.corpus.n_text, "Question/answer documents without frames");
  pre->add_option("--corpus-seed", pa.corpus.seed);
  pa.run.epochs = 10;

  std::string data, base, config, run_out = "run";
  auto* tr = app.add_subcommand("train", "Fine-tune adapters, gates and projection");
  tr->add_option("--data", data, "Dataset directory")->required();
  tr->add_option("--base", base, "Base model checkpoint")->required();
  tr->add_option("--config", config, "Training config of key = value lines")->check(CLI::ExistingFile);
  tr->add_option("--out", run_out, "Run directory");

  std::string ckpt, split = "val", log;
  bool qa_only = false;
  auto* ev = app.add_subcommand("eval", "Multiple-choice accuracy of a checkpoint");
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ev->add_option("--split", split)->check(CLI::IsMember({"train", "val"}));
  ev->add_flag("--qa-only", qa_only, "Score without the video");
  ev->add_option("--log", log, "Prediction log to write");

  std::string vqa_log, qa_log, report = "bias_report";
  auto* bias = app.add_subcommand("bias-report", "Shortcut and bias accuracies from two prediction logs");
  bias->add_option("--vqa", vqa_log, "Log of the video+question model")->required()->check(CLI::ExistingFile);
  bias->add_option("--qa", qa_log, "Log of the question-only model")->required()->check(CLI::ExistingFile);
  bias->add_option("--out", report, "Output prefix (.txt and .json)");

  std::string feature_file;
  auto* feats = app.add_subcommand("features", "Feature file utilities");
  feats->require_subcommand(1);
  auto* insp = feats->add_subcommand("inspect", "Print the shape and per-frame statistics");
  insp->add_option("file", feature_file)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) return gen_data(spec_file, n, seed, out);
    if (*pre) return pretrain(pa);
    if (*tr) return train_cmd(data, base, config, run_out);
    if (*ev) return eval_cmd(data, ckpt, qa_only, split, log);
    if (*bias) return bias_cmd(vqa_log, qa_log, report);
    if (*insp) return inspect(feature_file);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == Errc::ConfigInvalid ? 1 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}

#pragma once

// Multiple-choice prediction: each candidate is appended after the
// "The answer is" prefix and scored by the summed log-probability of its
// tokens and the closing EOS; the argmax wins, lowest index on ties.

#include "fvqa/model.hpp"
#include "fvqa/objectives.hpp"
#include "fvqa/prompt.hpp"
#include "fvqa/visual.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace fvqa {

enum class PredictMode { VQA, QA_only };

struct ScoreOptions {
  bool per_token_mean = false;
  bool adapters_on = true;
};

struct Prediction {
  int index = 0;
  std::vector<double> scores;
};

// Sum (or mean) of log P over the loss-masked positions of a teacher-forced
// layout; the layout's loss mask marks the candidate's tokens and EOS.
template <typename T>
double layout_log_likelihood(const ModelParams<T>& model, const PromptLayout& layout,
                             const Mat<T>& visual, const ScoreOptions& opts = {}) {
  const auto fp = forward(model, layout, visual, opts.adapters_on);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 1; t < layout.size(); ++t) {
    if (!layout.loss_mask[t]) continue;
    const auto row = fp.logits.row(static_cast<Eigen::Index>(t - 1));
    total += static_cast<double>(row(layout.ids[t]) - log_sum_exp(row));
    ++n;
  }
  if (n == 0) fail(Errc::EmptyMask, "candidate has no scored tokens");
  return opts.per_token_mean ? total / static_cast<double>(n) : total;
}

// Layout for candidate c: same prefix, choice c as the continuation.
inline PromptLayout candidate_layout(const QAExample& ex, int c, PredictMode mode, const Vocab& vocab,
                                     std::size_t n_v) {
  QAExample probe = ex;
  probe.answer_idx = c;
  return mode == PredictMode::VQA ? encode_prompt(probe, Arrangement::VQA, vocab, n_v)
                                  : encode_qa_only(probe, vocab);
}

// Prefix of `ex` (its listed choices included) continued by arbitrary text.
inline PromptLayout continuation_layout(const QAExample& ex, const std::string& text, PredictMode mode,
                                        const Vocab& vocab, std::size_t n_v) {
  auto base = candidate_layout(ex, 0, mode, vocab, n_v);
  std::size_t cut = 0;
  while (cut < base.size() && base.segments[cut] != Segment::AnswerText) ++cut;
  base.ids.resize(cut);
  base.segments.resize(cut);
  base.loss_mask.resize(cut);
  for (const auto& w : split_words(text)) {
    base.ids.push_back(vocab.id(w));
    base.segments.push_back(Segment::AnswerText);
    base.loss_mask.push_back(true);
  }
  base.ids.push_back(kEos);
  base.segments.push_back(Segment::Eos);
  base.loss_mask.push_back(true);
  return base;
}

template <typename T>
double score_candidate(const ModelParams<T>& model, const QAExample& ex, int c, const Mat<T>& visual,
                       const Vocab& vocab, PredictMode mode = PredictMode::VQA,
                       const ScoreOptions& opts = {}) {
  const auto layout = candidate_layout(ex, c, mode, vocab, static_cast<std::size_t>(visual.rows()));
  return layout_log_likelihood(model, layout, mode == PredictMode::VQA ? visual : Mat<T>(0, model.config.d_model),
                               opts);
}

// Argmax with first-index tie-breaking.
inline int argmax_first(const std::vector<double>& scores) {
  if (scores.empty()) fail(Errc::EmptyCandidates, "no candidates to choose from");
  int best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

// Scores each text in `candidates` as the continuation of ex's prompt.
// `features` are the raw encoder features (N_v x D_enc); ignored in QA_only mode.
template <typename T>
Prediction score_candidates(const ModelParams<T>& model, const QAExample& ex, const Mat<float>& features,
                            const Vocab& vocab, const std::vector<std::string>& candidates,
                            PredictMode mode = PredictMode::VQA, const ScoreOptions& opts = {}) {
  if (candidates.empty()) fail(Errc::EmptyCandidates, "example " + ex.id + " has no candidates");
  Mat<T> visual(0, model.config.d_model);
  if (mode == PredictMode::VQA) visual = project(model.proj, Mat<T>(features.cast<T>()));
  Prediction p;
  p.scores.reserve(candidates.size());
  for (const auto& text : candidates) {
    const auto layout = continuation_layout(ex, text, mode, vocab, static_cast<std::size_t>(features.rows()));
    p.scores.push_back(layout_log_likelihood(model, layout, visual, opts));
  }
  p.index = argmax_first(p.scores);
  return p;
}

template <typename T>
Prediction predict(const ModelParams<T>& model, const QAExample& ex, const Mat<float>& features,
                   const Vocab& vocab, PredictMode mode = PredictMode::VQA, const ScoreOptions& opts = {}) {
  if (ex.choices.empty()) fail(Errc::EmptyCandidates, "example " + ex.id + " has no choices");
  return score_candidates(model, ex, features, vocab, ex.choices, mode, opts);
}

}  // namespace fvqa

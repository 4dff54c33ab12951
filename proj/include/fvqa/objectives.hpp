#pragma once

// The three generative objectives over one <video, question, answer> triplet.
//
//   vqa  -sum_t log P(a_{t+1} | v, q, a_<=t)      answer tokens + EOS
//   vaq  -sum_t log P(q_{t+1} | v, a, q_<=t)      question tokens + EOS
//   qav  -sum_t log P(v_{t+1} | q, a, v_<=t)      frames, scored contrastively:
//
//        P(v_{t+1} | ...) = exp(v_{t+1} . h_t) / sum_i exp(v_i . h_t),  i over the
//        frames of the same video, h_0 = feature of the token right before the
//        first frame slot, v_i = projected frame tokens (no temperature).
//
// Each objective is averaged over the batch and summed over positions. The
// training step accumulates the gradients of every enabled objective and then
// applies a single update.
//
// Why the flipped objectives help the primary one: by Bayes' rule
//   P(a | v, q) = P(q | v, a) P(a | v) / P(q | v)  and
//   P(a | v, q) = P(v | q, a) P(a | q) / P(v | q),
// so for fixed (v, q) the answer posterior is proportional to the question
// likelihood P(q | v, a) and to the video likelihood P(v | q, a). The vqa
// term fits the posterior directly; vaq and qav fit those two likelihoods.

#include "fvqa/model.hpp"
#include "fvqa/optim.hpp"
#include "fvqa/prompt.hpp"
#include "fvqa/visual.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace fvqa {

struct ObjectiveToggles {
  bool vqa = true;
  bool vaq = true;
  bool qav = true;

  bool enabled(Arrangement a) const {
    switch (a) {
      case Arrangement::VQA: return vqa;
      case Arrangement::VAQ: return vaq;
      case Arrangement::QAV: return qav;
    }
    return false;
  }
  friend bool operator==(const ObjectiveToggles&, const ObjectiveToggles&) = default;
};

struct LossBundle {
  double l_vqa = 0.0;
  double l_vaq = 0.0;
  double l_qav = 0.0;
  double total = 0.0;
  ObjectiveToggles enabled;
};

struct ObjectiveOptions {
  bool adapters_on = true;
  bool stop_grad_targets = false;  // treat InfoNCE targets v_i as constants
  bool qa_only = false;            // vqa on the video-free prompt (text-prior model)
};

// One prompt plus the frame input it needs. Frames are either raw encoder
// features (projected by f) or, for base-model pretraining, bags of word ids
// whose token embeddings are averaged.
template <typename T>
struct Sample {
  PromptLayout layout;
  Mat<T> features;
  std::vector<std::vector<std::int32_t>> frame_words;
};

template <typename T>
Mat<T> visual_tokens(const ModelParams<T>& model, const Sample<T>& s) {
  if (!s.layout.has_video()) return Mat<T>(0, model.config.d_model);
  if (!s.frame_words.empty()) {
    Mat<T> v = Mat<T>::Zero(static_cast<Eigen::Index>(s.frame_words.size()), model.config.d_model);
    for (std::size_t i = 0; i < s.frame_words.size(); ++i) {
      for (auto id : s.frame_words[i]) v.row(static_cast<Eigen::Index>(i)) += model.tok_emb.row(id);
      v.row(static_cast<Eigen::Index>(i)) /= static_cast<T>(s.frame_words[i].size());
    }
    return v;
  }
  if (static_cast<std::size_t>(s.features.rows()) != s.layout.visual_count)
    fail(Errc::ShapeMismatch, "frame count does not match the layout's visual slots");
  return project(model.proj, s.features);
}

template <typename T>
struct TokenLoss {
  T value = T(0);
  Mat<T> dlogits;
  std::size_t positions = 0;
};

// -sum over loss-masked positions t of log softmax(logits[t-1])[ids[t]].
template <typename T>
TokenLoss<T> token_nll(const ForwardPass<T>& fp, const std::vector<bool>& mask, bool want_grad) {
  TokenLoss<T> out;
  const auto N = static_cast<Eigen::Index>(fp.length());
  if (want_grad) out.dlogits = Mat<T>::Zero(N, fp.logits.cols());
  for (Eigen::Index t = 1; t < N; ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    if (fp.segments[static_cast<std::size_t>(t)] == Segment::VisualPlaceholder)
      fail(Errc::WrongArrangement, "token loss over a visual slot");
    const auto row = fp.logits.row(t - 1);
    const T lse = log_sum_exp(row);
    const auto target = fp.ids[static_cast<std::size_t>(t)];
    out.value += lse - row(target);
    ++out.positions;
    if (want_grad) {
      out.dlogits.row(t - 1) = (row.array() - lse).exp().matrix();
      out.dlogits(t - 1, target) -= T(1);
    }
  }
  if (out.positions == 0) fail(Errc::EmptyMask, "no loss-masked positions");
  return out;
}

template <typename T>
struct InfoNceLoss {
  T value = T(0);
  Mat<T> probs;    // N_v x N_v, row t = P(v_i | context h_t)
  Mat<T> dhidden;  // N x D, nonzero on the N_v context rows
  Mat<T> dtargets; // N_v x D
};

// Contrastive next-frame loss: context t uses hidden row visual_begin-1+t.
template <typename T>
InfoNceLoss<T> info_nce(const Mat<T>& hidden, std::size_t visual_begin, const Mat<T>& targets,
                        bool want_grad) {
  const auto nv = targets.rows();
  if (nv < 1 || visual_begin < 1) fail(Errc::MissingVisualSlots, "InfoNCE needs frames after a prefix");
  const auto b = static_cast<Eigen::Index>(visual_begin) - 1;
  InfoNceLoss<T> out;
  const Mat<T> ctx = hidden.middleRows(b, nv);
  Mat<T> scores = ctx * targets.transpose();  // [t, i] = v_i . h_t
  out.probs = scores;
  for (Eigen::Index t = 0; t < nv; ++t) {
    const T lse = log_sum_exp(scores.row(t));
    out.value += lse - scores(t, t);
    out.probs.row(t) = (scores.row(t).array() - lse).exp().matrix();
  }
  if (want_grad) {
    Mat<T> dscores = out.probs;
    dscores.diagonal().array() -= T(1);
    out.dhidden = Mat<T>::Zero(hidden.rows(), hidden.cols());
    out.dhidden.middleRows(b, nv) = dscores * targets;
    out.dtargets = dscores.transpose() * ctx;
  }
  return out;
}

// Loss of one sample; when `grad` is non-null adds weight * dL/dparams into it
// (tensors in `scope` only).
template <typename T>
T sample_objective(const ModelParams<T>& model, const Sample<T>& s, const ObjectiveOptions& opts,
                   ModelParams<T>* grad, T weight, GradScope scope = GradScope::Trainable) {
  const Mat<T> v = visual_tokens(model, s);
  const auto fp = forward(model, s.layout, v, opts.adapters_on);
  const bool want = grad != nullptr;
  T value;
  Mat<T> dlogits, dhidden, dtargets;
  if (s.layout.arrangement == Arrangement::QAV) {
    if (!s.layout.has_video()) fail(Errc::MissingVisualSlots, "QAV layout without frames");
    auto nce = info_nce(fp.hidden, s.layout.visual_begin, v, want);
    value = nce.value;
    dhidden = std::move(nce.dhidden);
    if (!opts.stop_grad_targets) dtargets = std::move(nce.dtargets);
  } else {
    auto tl = token_nll(fp, s.layout.loss_mask, want);
    value = tl.value;
    dlogits = std::move(tl.dlogits);
  }
  if (!want) return value;

  auto g = backward(model, fp, dlogits, dhidden, scope);
  Mat<T> dv = std::move(g.visual);
  if (dtargets.size() > 0) dv += dtargets;
  if (s.layout.has_video() && dv.size() > 0) {
    if (!s.frame_words.empty()) {
      if (in_scope(scope, false)) {
        for (std::size_t i = 0; i < s.frame_words.size(); ++i) {
          const T share = T(1) / static_cast<T>(s.frame_words[i].size());
          for (auto id : s.frame_words[i])
            g.params.tok_emb.row(id) += share * dv.row(static_cast<Eigen::Index>(i));
        }
      }
    } else if (in_scope(scope, true)) {
      project_backward(s.features, dv, g.params.proj);
    }
  }
  accumulate(*grad, g.params, weight);
  return value;
}

inline void require_arrangement(const PromptLayout& layout, Arrangement expected) {
  if (layout.arrangement != expected)
    fail(Errc::WrongArrangement, std::string("expected ") + std::string(arrangement_name(expected)) +
                                     " layout, got " + std::string(arrangement_name(layout.arrangement)));
}

template <typename T>
struct ObjectiveResult {
  T loss = T(0);
  ModelParams<T> grad;
};

// Batch-mean objective value and (optionally) its gradient.
template <typename T>
ObjectiveResult<T> objective(const ModelParams<T>& model, const std::vector<Sample<T>>& batch,
                             Arrangement arrangement, const ObjectiveOptions& opts = {},
                             bool want_grad = true, GradScope scope = GradScope::Trainable) {
  if (batch.empty()) fail(Errc::EmptyBatch, "objective over an empty batch");
  ObjectiveResult<T> r;
  if (want_grad) r.grad = zeros_like(model, scope);
  const T w = T(1) / static_cast<T>(batch.size());
  for (const auto& s : batch) {
    require_arrangement(s.layout, arrangement);
    r.loss += w * sample_objective(model, s, opts, want_grad ? &r.grad : nullptr, w, scope);
  }
  return r;
}

template <typename T>
T loss_vqa(const ModelParams<T>& model, const std::vector<Sample<T>>& batch,
           const ObjectiveOptions& opts = {}) {
  return objective(model, batch, Arrangement::VQA, opts, false).loss;
}

template <typename T>
T loss_vaq(const ModelParams<T>& model, const std::vector<Sample<T>>& batch,
           const ObjectiveOptions& opts = {}) {
  return objective(model, batch, Arrangement::VAQ, opts, false).loss;
}

template <typename T>
T loss_qav(const ModelParams<T>& model, const std::vector<Sample<T>>& batch,
           const ObjectiveOptions& opts = {}) {
  return objective(model, batch, Arrangement::QAV, opts, false).loss;
}

// An example with its three arrangements pre-encoded.
struct EncodedExample {
  QAExample example;
  std::array<PromptLayout, 3> layouts;  // indexed by Arrangement
  PromptLayout qa_only;
  Mat<float> features;
  std::vector<std::vector<std::int32_t>> frame_words;  // optional
};

inline EncodedExample encode_example(const QAExample& ex, const Mat<float>& features,
                                     const Vocab& vocab, std::size_t max_len) {
  EncodedExample e;
  e.example = ex;
  e.features = features;
  const auto n_v = static_cast<std::size_t>(features.rows());
  for (auto a : {Arrangement::VQA, Arrangement::VAQ, Arrangement::QAV})
    e.layouts[static_cast<std::size_t>(a)] = encode_prompt(ex, a, vocab, n_v, max_len);
  e.qa_only = encode_qa_only(ex, vocab, max_len);
  return e;
}

template <typename T>
Sample<T> make_sample(const EncodedExample& e, Arrangement a) {
  Sample<T> s;
  s.layout = e.layouts[static_cast<std::size_t>(a)];
  s.features = e.features.cast<T>();
  s.frame_words = e.frame_words;
  return s;
}

template <typename T>
Sample<T> make_qa_only_sample(const EncodedExample& e) {
  Sample<T> s;
  s.layout = e.qa_only;
  return s;
}

template <typename T>
struct StepResult {
  LossBundle losses;
  ModelParams<T> gradient;  // the summed gradient that was applied
};

// Accumulates the batch-mean gradient of every enabled objective.
template <typename T>
StepResult<T> accumulate_objectives(const ModelParams<T>& model,
                                    const std::vector<const EncodedExample*>& batch,
                                    const ObjectiveToggles& toggles,
                                    const ObjectiveOptions& opts = {}) {
  if (batch.empty()) fail(Errc::EmptyBatch, "training step over an empty batch");
  StepResult<T> r;
  r.losses.enabled = toggles;
  r.gradient = zeros_like(model, GradScope::Trainable);
  const T w = T(1) / static_cast<T>(batch.size());
  for (auto a : {Arrangement::VQA, Arrangement::VAQ, Arrangement::QAV}) {
    if (!toggles.enabled(a)) continue;
    if (opts.qa_only && a != Arrangement::VQA) continue;
    double sum = 0.0;
    for (const auto* e : batch) {
      const auto s = opts.qa_only ? make_qa_only_sample<T>(*e) : make_sample<T>(*e, a);
      sum += static_cast<double>(sample_objective(model, s, opts, &r.gradient, w));
    }
    const double mean = sum / static_cast<double>(batch.size());
    switch (a) {
      case Arrangement::VQA: r.losses.l_vqa = mean; break;
      case Arrangement::VAQ: r.losses.l_vaq = mean; break;
      case Arrangement::QAV: r.losses.l_qav = mean; break;
    }
    r.losses.total += mean;
  }
  return r;
}

// One training update: forward/backward per enabled objective, summed
// gradients, exactly one optimizer step.
template <typename T>
StepResult<T> flipped_step(ModelParams<T>& model, const std::vector<const EncodedExample*>& batch,
                           const ObjectiveToggles& toggles, AdamW<T>& optimizer, double lr,
                           const ObjectiveOptions& opts = {}) {
  if (!toggles.vqa) fail(Errc::ConfigInvalid, "the vqa objective cannot be disabled");
  auto r = accumulate_objectives(model, batch, toggles, opts);
  optimizer.step(model, r.gradient, lr);
  return r;
}

}  // namespace fvqa

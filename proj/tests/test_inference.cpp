#include "fvqa/inference.hpp"
#include "fvqa/synth.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fvqa {
namespace {

using testing::micro_config;
using testing::random_example;
using testing::toy_vocab;

template <typename F>
Errc error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::Io;
}

TEST(Scorer, MatchesTeacherForcedExtraction) {
  const auto vocab = toy_vocab();
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = init_params<double>(micro_config(vocab), 40 + static_cast<std::uint64_t>(trial));
    testing::randomize_trainables(p, static_cast<std::uint64_t>(trial));
    const auto ex = random_example(rng, 2 + trial % 4, 1 + trial % 3, 1 + trial % 2);
    const Mat<float> feats = gaussian<float>(3, 5, 1.0, rng);
    const auto pred = predict(p, ex, feats, vocab);
    const Mat<double> visual = project(p.proj, Mat<double>(feats.cast<double>()));
    for (std::size_t c = 0; c < ex.choices.size(); ++c) {
      const double want = testing::extracted_score(p, ex, static_cast<int>(c), visual, vocab);
      EXPECT_LE(std::abs(pred.scores[c] - want), 1e-10 * std::max(1.0, std::abs(want)));
    }
  }
}

TEST(Scorer, UniformLogitsGiveTokenCountTimesLogVocab) {
  auto vocab = build_vocab({"x"}, 16, template_tokens());
  ASSERT_EQ(vocab.size(), 16u);
  auto p = init_params<double>(micro_config(vocab), 2);
  p.head.setZero();
  QAExample ex{"u", "v", "x", {"x", "x x x"}, 0, "causal"};
  const auto pred = predict(p, ex, Mat<float>::Ones(2, 5), vocab);
  EXPECT_NEAR(pred.scores[0], -2.0 * std::log(16.0), 1e-12);  // one word + EOS
  EXPECT_NEAR(pred.scores[1], -4.0 * std::log(16.0), 1e-12);
  EXPECT_EQ(pred.index, 0);
  ScoreOptions mean;
  mean.per_token_mean = true;
  const auto pm = predict(p, ex, Mat<float>::Ones(2, 5), vocab, PredictMode::VQA, mean);
  EXPECT_NEAR(pm.scores[0], pm.scores[1], 1e-12);
}

TEST(Scorer, SingletonAndTies) {
  const auto vocab = toy_vocab();
  Rng rng(6);
  auto p = init_params<double>(micro_config(vocab), 9);
  testing::randomize_trainables(p, 9);
  auto ex = random_example(rng, 1);
  EXPECT_EQ(predict(p, ex, gaussian<float>(2, 5, 1.0, rng), vocab).index, 0);
  ex = random_example(rng, 2);
  ex.choices[1] = ex.choices[0];
  const auto pred = predict(p, ex, gaussian<float>(2, 5, 1.0, rng), vocab);
  EXPECT_EQ(pred.scores[0], pred.scores[1]);
  EXPECT_EQ(pred.index, 0);
  ex.choices.clear();
  EXPECT_EQ(error_of([&] { predict(p, ex, gaussian<float>(2, 5, 1.0, rng), vocab); }), Errc::EmptyCandidates);
  EXPECT_EQ(error_of([] { argmax_first({}); }), Errc::EmptyCandidates);
}

TEST(Scorer, ArgmaxIgnoresAConstantShift) {
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> s(1 + rng() % 8);
    for (auto& v : s) v = std::round(n(rng));  // integers produce ties
    const int base = argmax_first(s);
    const double k = std::ldexp(1.0, static_cast<int>(rng() % 10)) * (rng() % 2 ? 1 : -1);
    for (auto& v : s) v += k;
    EXPECT_EQ(argmax_first(s), base);
  }
}

// The listed choices are part of the prefix, so the permutation acts on the
// scored continuations with the prefix held fixed.
TEST(Scorer, PermutingCandidatesPermutesScores) {
  const auto vocab = toy_vocab();
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = init_params<double>(micro_config(vocab), 60 + static_cast<std::uint64_t>(trial));
    testing::randomize_trainables(p, 60 + static_cast<std::uint64_t>(trial));
    const auto ex = random_example(rng, 4);
    const Mat<float> feats = gaussian<float>(2, 5, 1.0, rng);
    const auto base = predict(p, ex, feats, vocab);
    std::vector<std::size_t> perm(4);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::string> shuffled(4);
    for (std::size_t i = 0; i < 4; ++i) shuffled[i] = ex.choices[perm[i]];
    const auto moved = score_candidates(p, ex, feats, vocab, shuffled);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(moved.scores[i], base.scores[perm[i]]);
    const auto best = base.scores[static_cast<std::size_t>(base.index)];
    if (std::count(base.scores.begin(), base.scores.end(), best) == 1)
      EXPECT_EQ(perm[static_cast<std::size_t>(moved.index)], static_cast<std::size_t>(base.index));
  }
}

// Scoring choice c as a continuation is the same layout the VQA objective trains on.
TEST(Scorer, ContinuationOfAChoiceIsTheTrainingLayout) {
  const auto vocab = toy_vocab();
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto ex = random_example(rng, 1 + trial % 5);
    for (int c = 0; c < static_cast<int>(ex.choices.size()); ++c) {
      auto probe = ex;
      probe.answer_idx = c;
      EXPECT_EQ(continuation_layout(ex, ex.choices[static_cast<std::size_t>(c)], PredictMode::VQA, vocab, 3),
                encode_prompt(probe, Arrangement::VQA, vocab, 3));
      EXPECT_EQ(continuation_layout(ex, ex.choices[static_cast<std::size_t>(c)], PredictMode::QA_only, vocab, 3),
                encode_qa_only(probe, vocab));
    }
  }
}

// The two modes share every step after prompt assembly: scoring the QA-only
// layout by hand reproduces the QA_only prediction.
TEST(Scorer, QaOnlyModeOnlyChangesThePrompt) {
  const auto vocab = toy_vocab();
  Rng rng(14);
  auto p = init_params<double>(micro_config(vocab), 7);
  testing::randomize_trainables(p, 7);
  auto ex = random_example(rng, 3);
  const auto pred = predict(p, ex, gaussian<float>(2, 5, 1.0, rng), vocab, PredictMode::QA_only);
  for (int c = 0; c < 3; ++c) {
    auto probe = ex;
    probe.answer_idx = c;
    const auto layout = encode_qa_only(probe, vocab);
    EXPECT_FALSE(layout.has_video());
    EXPECT_EQ(pred.scores[static_cast<std::size_t>(c)], layout_log_likelihood(p, layout, Mat<double>(0, 8)));
  }
}

TEST(Scorer, UntrainedModelIsAtChance) {
  auto spec = ScenarioSpec::defaults();
  const auto ds = generate(spec, 1000, 17, 0.0);
  const auto vocab = world_vocab(spec);
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.n_adapter = 2;
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.max_seq_len = 64;
  cfg.d_enc = spec.d_enc;
  const auto p = init_params<float>(cfg, 5);
  int correct = 0;
  for (const auto& ex : ds.examples) correct += predict(p, ex.qa(), ex.features.values, vocab).index == ex.answer_idx;
  EXPECT_NEAR(correct / 1000.0, 0.2, 0.05);
}

}  // namespace
}  // namespace fvqa

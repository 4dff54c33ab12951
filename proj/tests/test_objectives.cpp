#include "fvqa/objectives.hpp"
#include "fvqa/optim.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace fvqa {
namespace {

using testing::micro_config;
using testing::random_example;
using testing::random_features;
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

// Vocab of exactly 16 entries: 3 specials, 12 template words, one content word.
Vocab vocab16() {
  auto v = build_vocab({"x"}, 16, template_tokens());
  EXPECT_EQ(v.size(), 16u);
  return v;
}

TEST(TokenLoss, UniformLogitsGiveLogVocabPerToken) {
  const auto vocab = vocab16();
  auto cfg = micro_config(vocab);
  auto p = init_params<double>(cfg, 3);
  p.head.setZero();
  QAExample ex{"u", "v", "x x", {"x x", "x"}, 0, "causal"};
  for (auto a : {Arrangement::VQA, Arrangement::VAQ}) {
    Sample<double> s{encode_prompt(ex, a, vocab, 2), Mat<double>::Ones(2, cfg.d_enc), {}};
    const double loss = objective(p, {s}, a, {}, false).loss;
    EXPECT_NEAR(loss, 3.0 * std::log(16.0), 1e-12);  // two target words + EOS
  }
}

TEST(InfoNce, MatchesEnumeration) {
  const auto vocab = toy_vocab();
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = init_params<double>(micro_config(vocab), 100 + static_cast<std::uint64_t>(trial));
    testing::randomize_trainables(p, 200 + static_cast<std::uint64_t>(trial));
    const std::size_t nv = 1 + static_cast<std::size_t>(trial % 5);
    Sample<double> s{encode_prompt(random_example(rng), Arrangement::QAV, vocab, nv), random_features(rng, nv, 5), {}};
    const double got = loss_qav(p, {s});
    const double want = testing::info_nce_by_enumeration(p, s);
    EXPECT_LE(std::abs(got - want), 1e-10 * std::max(1.0, std::abs(want))) << trial;
  }
}

TEST(InfoNce, SingleFrameIsExactlyZero) {
  const auto vocab = toy_vocab();
  Rng rng(1);
  auto p = init_params<double>(micro_config(vocab), 1);
  testing::randomize_trainables(p, 2);
  Sample<double> s{encode_prompt(random_example(rng), Arrangement::QAV, vocab, 1), random_features(rng, 1, 5), {}};
  EXPECT_EQ(loss_qav(p, {s}), 0.0);
}

TEST(InfoNce, IdenticalFramesGiveNvLogNv) {
  const auto vocab = toy_vocab();
  Rng rng(2);
  auto p = init_params<double>(micro_config(vocab), 1);
  for (std::size_t nv : {2u, 3u, 4u, 7u}) {
    Mat<double> x(static_cast<Eigen::Index>(nv), 5);
    x.rowwise() = random_features(rng, 1, 5).row(0);
    Sample<double> s{encode_prompt(random_example(rng), Arrangement::QAV, vocab, nv), x, {}};
    const double n = static_cast<double>(nv);
    EXPECT_NEAR(loss_qav(p, {s}), n * std::log(n), 1e-12);
  }
}

TEST(InfoNce, NeedsFrames) {
  Mat<double> h = Mat<double>::Zero(4, 3);
  EXPECT_EQ(error_of([&] { info_nce(h, 0, Mat<double>(Mat<double>::Zero(2, 3)), false); }),
            Errc::MissingVisualSlots);
  EXPECT_EQ(error_of([&] { info_nce(h, 2, Mat<double>(0, 3), false); }), Errc::MissingVisualSlots);
}

TEST(Objective, RejectsMismatchedArrangementAndEmptyBatch) {
  const auto vocab = toy_vocab();
  Rng rng(3);
  auto p = init_params<double>(micro_config(vocab), 1);
  Sample<double> s{encode_prompt(random_example(rng), Arrangement::VAQ, vocab, 2), random_features(rng, 2, 5), {}};
  EXPECT_EQ(error_of([&] { loss_vqa(p, {s}); }), Errc::WrongArrangement);
  EXPECT_EQ(error_of([&] { loss_vqa(p, std::vector<Sample<double>>{}); }), Errc::EmptyBatch);
}

TEST(Objective, TokenLossRejectsEmptyMask) {
  const auto vocab = toy_vocab();
  Rng rng(4);
  auto p = init_params<double>(micro_config(vocab), 1);
  auto layout = encode_prompt(random_example(rng), Arrangement::VQA, vocab, 2);
  std::fill(layout.loss_mask.begin(), layout.loss_mask.end(), false);
  const auto fp = forward(p, layout, Mat<double>(Mat<double>::Zero(2, 8)));
  EXPECT_EQ(error_of([&] { token_nll(fp, layout.loss_mask, false); }), Errc::EmptyMask);
}

TEST(Objective, BatchLossIsTheMeanOfSampleLosses) {
  const auto vocab = toy_vocab();
  Rng rng(5);
  auto p = init_params<double>(micro_config(vocab), 1);
  testing::randomize_trainables(p, 6);
  std::vector<Sample<double>> batch;
  double sum = 0.0;
  for (int i = 0; i < 4; ++i) {
    batch.push_back({encode_prompt(random_example(rng), Arrangement::VAQ, vocab, 3), random_features(rng, 3, 5), {}});
    sum += loss_vaq(p, std::vector<Sample<double>>{batch.back()});
  }
  EXPECT_NEAR(loss_vaq(p, batch), sum / 4.0, 1e-12);
}

std::vector<EncodedExample> encoded_batch(const Vocab& vocab, Rng& rng, int n, int nv) {
  std::vector<EncodedExample> out;
  for (int i = 0; i < n; ++i)
    out.push_back(encode_example(random_example(rng), random_features(rng, static_cast<std::size_t>(nv), 5).cast<float>(),
                                 vocab, kUnlimited));
  return out;
}

TEST(FlippedStep, AppliedGradientIsTheSumOfObjectiveGradients) {
  const auto vocab = toy_vocab();
  Rng rng(8);
  auto p = init_params<float>(micro_config(vocab), 2);
  testing::randomize_trainables(p, 3);
  const auto data = encoded_batch(vocab, rng, 3, 3);
  std::vector<const EncodedExample*> batch;
  for (const auto& e : data) batch.push_back(&e);

  auto sum = zeros_like(p, GradScope::Trainable);
  double total = 0.0;
  for (auto a : {Arrangement::VQA, Arrangement::VAQ, Arrangement::QAV}) {
    std::vector<Sample<float>> samples;
    for (const auto& e : data) samples.push_back(make_sample<float>(e, a));
    auto r = objective(p, samples, a);
    accumulate(sum, r.grad, 1.0f);
    total += r.loss;
  }
  AdamW<float> opt;
  auto model = p;
  const auto step = flipped_step(model, batch, {}, opt, 1e-3);
  EXPECT_NEAR(step.losses.total, total, 1e-5 * std::abs(total));
  EXPECT_NEAR(step.losses.total, step.losses.l_vqa + step.losses.l_vaq + step.losses.l_qav, 1e-9);
  auto a = step.gradient.tensors();
  auto b = sum.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i]->size() == 0) {
      EXPECT_EQ(a[i]->size(), 0);
      continue;
    }
    EXPECT_LE((*a[i] - *b[i]).norm(), 1e-5f * b[i]->norm()) << i;
  }
  EXPECT_EQ(opt.steps(), 1);
}

TEST(FlippedStep, DisabledObjectivesContributeNothing) {
  const auto vocab = toy_vocab();
  Rng rng(9);
  auto p = init_params<float>(micro_config(vocab), 2);
  testing::randomize_trainables(p, 3);
  const auto data = encoded_batch(vocab, rng, 2, 2);
  std::vector<const EncodedExample*> batch{&data[0], &data[1]};
  const auto only = accumulate_objectives(p, batch, {true, false, false});
  std::vector<Sample<float>> samples{make_sample<float>(data[0], Arrangement::VQA), make_sample<float>(data[1], Arrangement::VQA)};
  const auto r = objective(p, samples, Arrangement::VQA);
  EXPECT_EQ(only.losses.l_vaq, 0.0);
  EXPECT_EQ(only.losses.l_qav, 0.0);
  EXPECT_NEAR(only.losses.total, r.loss, 1e-5);
  EXPECT_LE((only.gradient.adapter_tokens - r.grad.adapter_tokens).norm(), 1e-6f * r.grad.adapter_tokens.norm());
}

TEST(FlippedStep, VqaCannotBeDisabled) {
  const auto vocab = toy_vocab();
  Rng rng(10);
  auto p = init_params<float>(micro_config(vocab), 2);
  const auto data = encoded_batch(vocab, rng, 1, 2);
  AdamW<float> opt;
  EXPECT_EQ(error_of([&] { flipped_step(p, {&data[0]}, {false, true, true}, opt, 1e-3); }), Errc::ConfigInvalid);
}

TEST(FlippedStep, OnlyTrainablesMoveAndFeaturesStayFrozen) {
  const auto vocab = toy_vocab();
  Rng rng(11);
  auto p = init_params<float>(micro_config(vocab), 2);
  const auto data = encoded_batch(vocab, rng, 2, 3);
  const auto features_before = data[0].features;
  auto model = p;
  AdamW<float> opt;
  flipped_step(model, {&data[0], &data[1]}, {}, opt, 1e-2);
  EXPECT_EQ(data[0].features, features_before);
  model.visit([&](const std::string& name, const Mat<float>& m, bool trainable) {
    const Mat<float>* before = nullptr;
    p.visit([&](const std::string& n, const Mat<float>& q, bool) {
      if (n == name) before = &q;
    });
    if (trainable)
      EXPECT_NE(m, *before) << name;
    else
      EXPECT_EQ(m, *before) << name;
  });
}

TEST(FlippedStep, GatesLeaveZeroAfterTheFirstStep) {
  const auto vocab = toy_vocab();
  Rng rng(12);
  auto p = init_params<float>(micro_config(vocab), 2);
  const auto data = encoded_batch(vocab, rng, 2, 3);
  AdamW<float> opt;
  flipped_step(p, {&data[0], &data[1]}, {}, opt, 1e-2);
  EXPECT_GT(p.gates.cwiseAbs().minCoeff(), 0.0f);
}

TEST(AdamW, DecoupledDecaySkipsGatesNormsAndBiases) {
  EXPECT_TRUE(decays("adapter.tokens"));
  EXPECT_TRUE(decays("proj.weight"));
  EXPECT_FALSE(decays("adapter.gates"));
  EXPECT_FALSE(decays("proj.bias"));
  EXPECT_FALSE(decays("final_norm"));
  EXPECT_FALSE(decays("layers.0.attn_norm"));
  EXPECT_FALSE(decays("layers.1.b1"));
}

TEST(AdamW, FirstStepMatchesHandComputation) {
  const auto vocab = toy_vocab();
  auto p = init_params<double>(micro_config(vocab), 4);
  testing::randomize_trainables(p, 5);
  auto g = zeros_like(p, GradScope::Trainable);
  Rng rng(6);
  g.proj.weight = gaussian<double>(g.proj.weight.rows(), g.proj.weight.cols(), 1.0, rng);
  g.gates = gaussian<double>(g.gates.rows(), g.gates.cols(), 1.0, rng);
  const auto before = p;
  AdamW<double> opt({0.9, 0.95, 1e-8, 0.1});
  const double lr = 0.01;
  opt.step(p, g, lr);
  // Step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
  for (Eigen::Index i = 0; i < g.proj.weight.size(); ++i) {
    const double w0 = before.proj.weight.data()[i], gi = g.proj.weight.data()[i];
    const double want = w0 * (1 - lr * 0.1) - lr * gi / (std::abs(gi) + 1e-8);
    EXPECT_NEAR(p.proj.weight.data()[i], want, 1e-12);
  }
  for (Eigen::Index i = 0; i < g.gates.size(); ++i) {
    const double gi = g.gates.data()[i];
    EXPECT_NEAR(p.gates.data()[i], before.gates.data()[i] - lr * gi / (std::abs(gi) + 1e-8), 1e-12);
  }
  EXPECT_EQ(p.tok_emb, before.tok_emb);
  EXPECT_EQ(p.adapter_tokens, before.adapter_tokens * (1 - lr * 0.1));  // zero gradient: decay only
}

TEST(Schedule, WarmupThenCosine) {
  EXPECT_DOUBLE_EQ(warmup_cosine(0, 100, 1.0, 0.05), 0.2);
  EXPECT_DOUBLE_EQ(warmup_cosine(4, 100, 1.0, 0.05), 1.0);
  EXPECT_DOUBLE_EQ(warmup_cosine(5, 100, 1.0, 0.05), 1.0);
  EXPECT_NEAR(warmup_cosine(52, 100, 1.0, 0.05), 0.5 * (1 + std::cos(std::numbers::pi * 47.0 / 95.0)), 1e-15);
  EXPECT_NEAR(warmup_cosine(100, 100, 1.0, 0.05), 0.0, 1e-15);
  double prev = 2.0;
  for (long long s = 5; s < 100; ++s) {
    const double lr = warmup_cosine(s, 100, 1.0, 0.05);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

}  // namespace
}  // namespace fvqa

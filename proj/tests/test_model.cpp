#include "fvqa/model.hpp"
#include "fvqa/objectives.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

namespace fvqa {
namespace {

using testing::micro_config;
using testing::random_example;
using testing::random_features;
using testing::toy_vocab;

TEST(ModelInit, GatesStartAtZero) {
  const auto vocab = toy_vocab();
  for (std::uint64_t seed : {1u, 2u, 99u}) {
    auto p = init_params<double>(micro_config(vocab, 8, 3, 2), seed);
    EXPECT_EQ(p.gates.rows(), 3);
    EXPECT_EQ(p.gates.cols(), 2);
    EXPECT_TRUE((p.gates.array() == 0.0).all());
  }
}

TEST(ModelInit, TrainableCountMatchesClosedForm) {
  ModelConfig c;
  c.d_model = 64;
  c.n_layers = 4;
  c.n_heads = 4;
  c.n_adapter = 10;
  c.d_enc = 16;
  c.vocab_size = 50;
  EXPECT_EQ(c.trainable_count(), 3664);
  EXPECT_EQ(init_params<float>(c, 3).trainable_count(), 3664);
}

TEST(ModelInit, SameSeedIsBitIdentical) {
  const auto vocab = toy_vocab();
  auto a = init_params<float>(micro_config(vocab), 5);
  auto b = init_params<float>(micro_config(vocab), 5);
  auto ta = a.tensors();
  auto tb = b.tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i], *tb[i]);
}

TEST(ModelInit, RejectsBadConfig) {
  const auto vocab = toy_vocab();
  auto c = micro_config(vocab);
  c.n_heads = 3;  // 8 % 3 != 0
  try {
    init_params<double>(c, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::BadConfig);
  }
}

TEST(Forward, ZeroGateMakesAdaptersInvisible) {
  const auto vocab = toy_vocab();
  Rng rng(11);
  auto p = init_params<double>(micro_config(vocab), 4);
  for (auto arr : {Arrangement::VQA, Arrangement::VAQ, Arrangement::QAV}) {
    auto layout = encode_prompt(random_example(rng), arr, vocab, 3);
    Mat<double> v = project(p.proj, random_features(rng, 3, 5));
    auto on = forward(p, layout, v, true);
    auto off = forward(p, layout, v, false);
    EXPECT_LE((on.logits - off.logits).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Forward, RejectsOverlongAndMismatchedInputs) {
  const auto vocab = toy_vocab();
  Rng rng(2);
  auto cfg = micro_config(vocab);
  cfg.max_seq_len = 8;
  auto p = init_params<double>(cfg, 1);
  auto layout = encode_prompt(random_example(rng), Arrangement::VQA, vocab, 2);
  Mat<double> v = Mat<double>::Zero(2, 8);
  try {
    forward(p, layout, v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SeqTooLong);
  }
  cfg.max_seq_len = 64;
  auto p2 = init_params<double>(cfg, 1);
  Mat<double> wrong = Mat<double>::Zero(3, 8);
  try {
    forward(p2, layout, wrong);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
}

TEST(Forward, RightPaddingLeavesRealPositionsUnchanged) {
  const auto vocab = toy_vocab();
  Rng rng(8);
  auto p = init_params<double>(micro_config(vocab), 2);
  testing::randomize_trainables(p, 3);
  auto layout = encode_prompt(random_example(rng), Arrangement::VQA, vocab, 2);
  Mat<double> v = project(p.proj, random_features(rng, 2, 5));
  auto a = forward(p, layout, v);
  auto b = forward(p, pad_to(layout, layout.size() + 5), v);
  EXPECT_LE((a.logits - b.logits.topRows(a.logits.rows())).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, SequenceAttentionRowsSumToOne) {
  const auto vocab = toy_vocab();
  Rng rng(21);
  auto p = init_params<double>(micro_config(vocab, 8, 2, 2), 9);
  testing::randomize_trainables(p, 10);
  auto layout = encode_prompt(random_example(rng), Arrangement::VQA, vocab, 3);
  auto fp = forward(p, layout, Mat<double>(project(p.proj, random_features(rng, 3, 5))));
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < 2; ++h) {
      const auto& s = fp.layers[static_cast<std::size_t>(l)].probs_seq[static_cast<std::size_t>(h)];
      EXPECT_LE((s.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
      auto gated = fp.gated_adapter_attention(p, l, h);
      Vec<double> mass = gated.rowwise().sum();
      EXPECT_LE((mass.array() - p.gates(l, h)).abs().maxCoeff(), 1e-9);
    }
  }
}

// Changing tokens (or visual inputs) after position t leaves logits at
// positions <= t bit-for-bit unchanged.
TEST(Forward, FutureTokensNeverReachThePast) {
  const auto vocab = toy_vocab();
  Rng rng(13);
  for (int probe = 0; probe < 200; ++probe) {
    auto p = init_params<double>(micro_config(vocab), 100 + static_cast<std::uint64_t>(probe));
    testing::randomize_trainables(p, static_cast<std::uint64_t>(probe));
    const auto arr = static_cast<Arrangement>(probe % 3);
    auto layout = encode_prompt(random_example(rng), arr, vocab, 3);
    Mat<double> v = project(p.proj, random_features(rng, 3, 5));
    const auto base = forward(p, layout, v);
    const std::size_t t = rng() % (layout.size() - 1);
    auto changed = layout;
    Mat<double> v2 = v;
    for (std::size_t u = t + 1; u < layout.size(); ++u) {
      if (layout.segments[u] == Segment::VisualPlaceholder)
        v2.row(static_cast<Eigen::Index>(u - layout.visual_begin)).setRandom();
      else
        changed.ids[u] = static_cast<std::int32_t>(3 + rng() % (vocab.size() - 3));
    }
    const auto after = forward(p, changed, v2);
    const auto rows = static_cast<Eigen::Index>(t + 1);
    EXPECT_EQ((base.logits.topRows(rows) - after.logits.topRows(rows)).cwiseAbs().maxCoeff(), 0.0) << probe;
  }
}

TEST(Backward, RequiresRecordedPass) {
  const auto vocab = toy_vocab();
  auto p = init_params<double>(micro_config(vocab), 1);
  ForwardPass<double> empty;
  try {
    backward(p, empty, Mat<double>(), Mat<double>());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::GraphNotRecorded);
  }
}

TEST(Backward, FrozenTensorsGetNoGradient) {
  const auto vocab = toy_vocab();
  Rng rng(4);
  auto p = init_params<double>(micro_config(vocab), 1);
  Sample<double> s{encode_prompt(random_example(rng), Arrangement::VQA, vocab, 2),
                   random_features(rng, 2, 5), {}};
  auto r = objective(p, {s}, Arrangement::VQA);
  EXPECT_EQ(r.grad.tok_emb.size(), 0);
  EXPECT_EQ(r.grad.head.size(), 0);
  EXPECT_EQ(r.grad.layers[0].wq.size(), 0);
  EXPECT_GT(r.grad.proj.weight.norm(), 0.0);
  EXPECT_GT(r.grad.gates.norm(), 0.0);
}

TEST(Backward, ZeroHeadZeroesAdapterGradients) {
  const auto vocab = toy_vocab();
  Rng rng(5);
  auto p = init_params<double>(micro_config(vocab), 1);
  testing::randomize_trainables(p, 2);
  p.head.setZero();
  auto layout = encode_prompt(random_example(rng), Arrangement::VQA, vocab, 2);
  Mat<double> v = project(p.proj, random_features(rng, 2, 5));
  auto fp = forward(p, layout, v);
  Mat<double> dlogits = Mat<double>::Ones(fp.logits.rows(), fp.logits.cols());  // L = sum(logits)
  auto g = backward(p, fp, dlogits, Mat<double>());
  EXPECT_EQ(g.params.adapter_tokens.norm(), 0.0);
  EXPECT_EQ(g.params.gates.norm(), 0.0);
}

class GradientCheck : public ::testing::TestWithParam<Arrangement> {};

TEST_P(GradientCheck, TrainableGradientsMatchCentralDifferences) {
  const auto vocab = toy_vocab();
  Rng rng(31);
  auto p = init_params<double>(micro_config(vocab, 8, 2, 2, 3), 17);
  testing::randomize_trainables(p, 18);
  std::vector<Sample<double>> batch;
  for (int i = 0; i < 2; ++i)
    batch.push_back({encode_prompt(random_example(rng), GetParam(), vocab, 3), random_features(rng, 3, 5), {}});
  auto r = objective(p, batch, GetParam());
  auto results = testing::finite_difference_check(p, r.grad, [&](const ModelParams<double>& m) {
    return objective(m, batch, GetParam(), {}, false).loss;
  });
  ASSERT_EQ(results.size(), 4u);
  for (const auto& res : results) {
    EXPECT_LE(res.rel_error, 1e-6) << res.tensor;
    EXPECT_GT(res.analytic_norm, 0.0) << res.tensor;
  }
}

TEST_P(GradientCheck, BackboneGradientsMatchCentralDifferences) {
  const auto vocab = toy_vocab();
  Rng rng(41);
  auto p = init_params<double>(micro_config(vocab, 8, 1, 2, 2), 3);
  testing::randomize_trainables(p, 4);
  std::vector<Sample<double>> batch{
      {encode_prompt(random_example(rng), GetParam(), vocab, 2), random_features(rng, 2, 5), {}}};
  auto r = objective(p, batch, GetParam(), {}, true, GradScope::Backbone);
  auto results = testing::finite_difference_check(p, r.grad, [&](const ModelParams<double>& m) {
    return objective(m, batch, GetParam(), {}, false, GradScope::Backbone).loss;
  });
  for (const auto& res : results) EXPECT_LE(res.rel_error, 1e-6) << res.tensor;
}

INSTANTIATE_TEST_SUITE_P(AllArrangements, GradientCheck,
                         ::testing::Values(Arrangement::VQA, Arrangement::VAQ, Arrangement::QAV));

}  // namespace
}  // namespace fvqa

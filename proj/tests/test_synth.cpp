#include "fvqa/synth.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

namespace fvqa {
namespace {

namespace fs = std::filesystem;

template <typename F>
Errc error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::Io;
}

// Second oracle: regex over the question, string comparison over the trace.
std::string second_oracle(const ScenarioSpec& spec, const EventTrace& trace, const std::string& q) {
  std::vector<std::string> texts;
  for (const auto& e : trace) texts.push_back(spec.event_text(e));
  std::smatch m;
  static const std::regex after("^what happens after (.+)$"), before("^what happens before (.+)$"),
      why("^why did (.+)$"), did("^what did (\\S+) do with (\\S+)$");
  auto at = [&](const std::string& ev) {
    const auto it = std::find(texts.begin(), texts.end(), ev);
    return it == texts.end() ? -1 : static_cast<int>(it - texts.begin());
  };
  if (std::regex_match(q, m, after)) {
    const int t = at(m[1]);
    return t >= 0 && t + 1 < static_cast<int>(texts.size()) ? texts[static_cast<std::size_t>(t + 1)] : "<none>";
  }
  if (std::regex_match(q, m, before) || std::regex_match(q, m, why)) {
    const int t = at(m[1]);
    return t > 0 ? texts[static_cast<std::size_t>(t - 1)] : "<none>";
  }
  if (std::regex_match(q, m, did)) {
    for (const auto& e : trace) {
      std::istringstream is(spec.event_text(e));
      std::string actor, action, object;
      is >> actor >> action >> object;
      if (actor == m[1] && object == m[2]) return action;
    }
  }
  return "<none>";
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TEST(Oracle, DirectLookups) {
  auto spec = ScenarioSpec::defaults();
  EventTrace trace{{0, spec.action_index("throws"), spec.object_index("ball"), 0},
                   {1, spec.action_index("catches"), spec.object_index("ball"), 1}};
  EXPECT_EQ(oracle_answer(spec, trace, "what happens after man throws ball"), "woman catches ball");
  EXPECT_EQ(oracle_answer(spec, trace, "what happens before woman catches ball"), "man throws ball");
  EXPECT_EQ(oracle_answer(spec, trace, "why did woman catches ball"), "man throws ball");
  EXPECT_EQ(oracle_answer(spec, trace, "what did woman do with ball"), "catches");
  EXPECT_EQ(error_of([&] { oracle_answer(spec, trace, "what happens before man throws ball"); }),
            Errc::NothingBefore);
  EXPECT_EQ(error_of([&] { oracle_answer(spec, trace, "what happens after woman catches ball"); }),
            Errc::NothingAfter);
  EXPECT_EQ(error_of([&] { oracle_answer(spec, trace, "how many balls"); }), Errc::UnknownTemplate);
  EXPECT_EQ(error_of([&] { oracle_answer(spec, trace, "what happens after boy opens door"); }),
            Errc::NotInTrace);
}

TEST(Oracle, AgreesWithSecondImplementation) {
  const auto spec = ScenarioSpec::defaults();
  Rng rng(12);
  int compared = 0;
  for (int i = 0; i < 500; ++i) {
    const auto trace = sample_trace(spec, rng);
    const auto& x = trace[rng() % trace.size()];
    const std::string ev = spec.event_text(x);
    const std::vector<std::string> questions{
        "what happens after " + ev, "what happens before " + ev, "why did " + ev,
        question_text(spec, QuestionKind::Do, x)};
    const auto& q = questions[static_cast<std::size_t>(i % 4)];
    std::string a;
    try {
      a = oracle_answer(spec, trace, q);
    } catch (const Error&) {
      a = "<none>";
    }
    EXPECT_EQ(a, second_oracle(spec, trace, q)) << q;
    ++compared;
  }
  EXPECT_EQ(compared, 500);
}

class Generated : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    spec_ = new ScenarioSpec(ScenarioSpec::defaults());
    ds_ = new Dataset(generate(*spec_, 5000, 21));
    auto ref_spec = *spec_;
    ref_spec.bias_rate = 0.0;
    const auto ref = generate(ref_spec, 20000, 99, 0.0);
    baseline_ = new TextPriorBaseline(world_text_prior(*spec_, qa_examples(ref, ref.train)));
  }
  static void TearDownTestSuite() {
    delete spec_;
    delete ds_;
    delete baseline_;
  }
  static ScenarioSpec* spec_;
  static Dataset* ds_;
  static TextPriorBaseline* baseline_;
};
ScenarioSpec* Generated::spec_ = nullptr;
Dataset* Generated::ds_ = nullptr;
TextPriorBaseline* Generated::baseline_ = nullptr;

TEST_F(Generated, EveryQuestionIsAnsweredByTheOracle) {
  for (const auto& ex : ds_->examples) {
    const auto answer = oracle_answer(*spec_, ex.trace, ex.question);
    EXPECT_EQ(ex.choices[static_cast<std::size_t>(ex.answer_idx)], answer) << ex.id;
    EXPECT_EQ(std::count(ex.choices.begin(), ex.choices.end(), answer), 1) << ex.id;
    EXPECT_EQ(second_oracle(*spec_, ex.trace, ex.question), answer);
    EXPECT_EQ(ex.choices.size(), static_cast<std::size_t>(spec_->n_choices));
  }
}

TEST_F(Generated, AnswerPositionsAreBalanced) {
  std::vector<int> count(static_cast<std::size_t>(spec_->n_choices));
  for (const auto& ex : ds_->examples) ++count[static_cast<std::size_t>(ex.answer_idx)];
  const double expected = 5000.0 / spec_->n_choices;
  for (int c : count) EXPECT_LE(std::abs(c - expected) / 5000.0, 0.02);
}

TEST_F(Generated, ExactMixAndBiasCounts) {
  std::map<std::string, int> qtypes;
  int biased = 0;
  for (const auto& ex : ds_->examples) {
    ++qtypes[ex.qtype];
    biased += ex.is_biased;
  }
  EXPECT_EQ(qtypes["causal"], 2000);
  EXPECT_EQ(qtypes["temporal"], 2000);
  EXPECT_EQ(qtypes["descriptive"], 1000);
  EXPECT_EQ(biased, 1500);
}

TEST_F(Generated, SplitIsEightyTwentyAndDisjoint) {
  EXPECT_EQ(ds_->train.size(), 4000u);
  EXPECT_EQ(ds_->val.size(), 1000u);
  std::vector<std::size_t> all = ds_->train;
  all.insert(all.end(), ds_->val.begin(), ds_->val.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
}

TEST_F(Generated, RulePriorIsRightExactlyOnUnbiasedExamples) {
  for (const auto& ex : ds_->examples) {
    const int plausible = rule_prior_choice(*spec_, ex.qa());
    ASSERT_GE(plausible, 0) << ex.id;
    EXPECT_EQ(plausible == ex.answer_idx, !ex.is_biased) << ex.id;
  }
}

TEST_F(Generated, FrequencyBaselineIsWrongOnEveryBiasedExample) {
  std::size_t unbiased = 0, agree = 0;
  for (const auto& ex : ds_->examples) {
    const int guess = baseline_->predict(ex.qa());
    if (ex.is_biased) {
      EXPECT_NE(guess, ex.answer_idx) << ex.id;
    } else {
      ++unbiased;
      agree += guess == ex.answer_idx;
    }
  }
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(unbiased), 0.99);
}

TEST_F(Generated, FullyBiasedSetDefeatsTheTextPrior) {
  auto spec = *spec_;
  spec.bias_rate = 1.0;
  const auto ds = generate(spec, 1000, 5);
  int correct = 0;
  for (auto i : ds.val) correct += baseline_->predict(ds.examples[i].qa()) == ds.examples[i].answer_idx;
  EXPECT_LE(static_cast<double>(correct) / static_cast<double>(ds.val.size()), 1.0 / spec.n_choices);
}

TEST(Generate, SameSeedGivesByteIdenticalFiles) {
  auto spec = ScenarioSpec::defaults();
  const auto root = fs::temp_directory_path() / "fvqa_gen_test";
  fs::remove_all(root);
  write_dataset(root / "a", spec, generate(spec, 60, 3));
  write_dataset(root / "b", spec, generate(spec, 60, 3));
  write_dataset(root / "c", spec, generate(spec, 60, 4));
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), root / "a");
    EXPECT_EQ(read_file(entry.path()), read_file(root / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 4u + 60u);
  EXPECT_NE(read_file(root / "a" / "train.jsonl"), read_file(root / "c" / "train.jsonl"));
  fs::remove_all(root);
}

TEST(Generate, UnbiasedSetAgreesWithTheTextPrior) {
  auto spec = ScenarioSpec::defaults();
  spec.bias_rate = 0.0;
  const auto ds = generate(spec, 400, 8);
  for (const auto& ex : ds.examples) EXPECT_EQ(rule_prior_choice(spec, ex.qa()), ex.answer_idx) << ex.question;
}

TEST(Generate, RejectsBadSpecs) {
  auto spec = ScenarioSpec::defaults();
  spec.rules.clear();
  EXPECT_EQ(error_of([&] { generate(spec, 10, 1); }), Errc::BadSpec);
  spec = ScenarioSpec::defaults();
  spec.bias_rate = 1.5;
  EXPECT_EQ(error_of([&] { generate(spec, 10, 1); }), Errc::BadSpec);
  spec = ScenarioSpec::defaults();
  spec.n_choices = 1;
  EXPECT_EQ(error_of([&] { generate(spec, 10, 1); }), Errc::BadSpec);
}

TEST(ScenarioFile, ParsesKeyValues) {
  std::istringstream is(
      "# toy world\n"
      "bias_rate = 0.5\n"
      "mix = 0.2 0.3 0.5   # causal temporal descriptive\n"
      "n_choices = 4\n");
  const auto spec = scenario_from_key_values(parse_key_values(is, "test"));
  EXPECT_EQ(spec.bias_rate, 0.5);
  EXPECT_EQ(spec.n_choices, 4);
  EXPECT_EQ(spec.frac_descriptive, 0.5);
  std::istringstream bad("colour = red\n");
  EXPECT_EQ(error_of([&] { scenario_from_key_values(parse_key_values(bad, "test")); }), Errc::ConfigInvalid);
  std::istringstream no_eq("bias_rate 0.5\n");
  EXPECT_EQ(error_of([&] { parse_key_values(no_eq, "test"); }), Errc::ConfigInvalid);
}

}  // namespace
}  // namespace fvqa

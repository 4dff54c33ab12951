#pragma once

// Deterministic synthetic VideoQA benchmark.
//
// Every question refers to one event X of the video and asks about a target
// event E* whose identity the trace fixes:
//
//   temporal     "what happens after X"   -> event at t_X + 1
//                "what happens before X"  -> event at t_X - 1
//   causal       "why did X"              -> event at t_X - 1 (its cause)
//   descriptive  "what did A do with O"   -> action of A's event on O
//
// The world's rules make one answer textually plausible from the question
// alone (the rule successor / predecessor of X's action on the same object,
// or the object's typical action). A biased example is built so that the
// plausible answer is wrong and appears among the distractors; in an unbiased
// example it is the correct answer and no distractor matches it.

#include "fvqa/prompt.hpp"
#include "fvqa/scenario.hpp"
#include "fvqa/visual.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fvqa {

enum class QuestionKind { After, Before, Why, Do };

struct SynthExample {
  std::string id;
  EventTrace trace;
  FrameFeatureMatrix features;
  std::string question;
  std::vector<std::string> choices;
  int answer_idx = 0;
  std::string qtype;
  bool is_biased = false;

  QAExample qa() const {
    return {id, features.video_id, question, choices, answer_idx, qtype};
  }
};

struct Dataset {
  std::vector<SynthExample> examples;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

inline std::string question_text(const ScenarioSpec& spec, QuestionKind kind, const Event& x) {
  switch (kind) {
    case QuestionKind::After: return "what happens after " + spec.event_text(x);
    case QuestionKind::Before: return "what happens before " + spec.event_text(x);
    case QuestionKind::Why: return "why did " + spec.event_text(x);
    case QuestionKind::Do:
      return "what did " + spec.actors.at(static_cast<std::size_t>(x.actor)) + " do with " +
             spec.objects.at(static_cast<std::size_t>(x.object));
  }
  return {};
}

namespace detail {

inline bool starts_with(const std::vector<std::string>& words, const std::vector<std::string>& prefix) {
  return words.size() >= prefix.size() && std::equal(prefix.begin(), prefix.end(), words.begin());
}

inline Event parse_event(const ScenarioSpec& spec, const std::vector<std::string>& w, std::size_t at) {
  if (w.size() != at + 3) fail(Errc::UnknownTemplate, "expected '<actor> <action> <object>'");
  auto find = [](const std::vector<std::string>& v, const std::string& s) {
    auto it = std::find(v.begin(), v.end(), s);
    if (it == v.end()) fail(Errc::UnknownTemplate, "unknown word '" + s + "'");
    return static_cast<int>(it - v.begin());
  };
  Event e;
  e.actor = find(spec.actors, w[at]);
  e.action = find(spec.actions, w[at + 1]);
  e.object = find(spec.objects, w[at + 2]);
  return e;
}

inline bool same_event(const Event& a, const Event& b) {
  return a.actor == b.actor && a.action == b.action && a.object == b.object;
}

}  // namespace detail

// Answers a templated question by replaying the trace.
inline std::string oracle_answer(const ScenarioSpec& spec, const EventTrace& trace,
                                 const std::string& question) {
  const auto w = split_words(question);
  auto locate = [&](const Event& x) -> std::size_t {
    for (std::size_t t = 0; t < trace.size(); ++t)
      if (detail::same_event(trace[t], x)) return t;
    fail(Errc::NotInTrace, "'" + spec.event_text(x) + "' does not occur in the video");
  };
  if (detail::starts_with(w, {"what", "happens", "after"})) {
    const auto t = locate(detail::parse_event(spec, w, 3));
    if (t + 1 >= trace.size()) fail(Errc::NothingAfter, "event is the last one");
    return spec.event_text(trace[t + 1]);
  }
  if (detail::starts_with(w, {"what", "happens", "before"})) {
    const auto t = locate(detail::parse_event(spec, w, 3));
    if (t == 0) fail(Errc::NothingBefore, "event is the first one");
    return spec.event_text(trace[t - 1]);
  }
  if (detail::starts_with(w, {"why", "did"})) {
    const auto t = locate(detail::parse_event(spec, w, 2));
    if (t == 0) fail(Errc::NothingBefore, "event has no preceding cause");
    return spec.event_text(trace[t - 1]);
  }
  if (w.size() == 6 && detail::starts_with(w, {"what", "did"}) && w[3] == "do" && w[4] == "with") {
    const int actor = spec.actor_index(w[2]);
    const int object = spec.object_index(w[5]);
    for (const auto& e : trace)
      if (e.actor == actor && e.object == object) return spec.actions[static_cast<std::size_t>(e.action)];
    fail(Errc::NotInTrace, "no event of " + w[2] + " with " + w[5]);
  }
  fail(Errc::UnknownTemplate, "'" + question + "'");
}

namespace detail {

struct Plan {
  QuestionKind kind;
  bool biased;
  int answer_idx;
};

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

// Exact-count assignment of kinds, bias flags and answer slots.
inline std::vector<Plan> make_plans(const ScenarioSpec& spec, std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x91A));
  std::vector<Plan> plans(n);
  const auto n_causal = static_cast<std::size_t>(std::llround(spec.frac_causal * static_cast<double>(n)));
  const auto n_temporal =
      std::min(n - n_causal, static_cast<std::size_t>(std::llround(spec.frac_temporal * static_cast<double>(n))));
  auto order = shuffled_indices(n, rng);
  for (std::size_t k = 0; k < n; ++k) {
    auto& p = plans[order[k]];
    if (k < n_causal)
      p.kind = QuestionKind::Why;
    else if (k < n_causal + n_temporal)
      p.kind = (k - n_causal) % 2 == 0 ? QuestionKind::After : QuestionKind::Before;
    else
      p.kind = QuestionKind::Do;
  }
  const auto n_biased = static_cast<std::size_t>(std::llround(spec.bias_rate * static_cast<double>(n)));
  order = shuffled_indices(n, rng);
  for (std::size_t k = 0; k < n; ++k) plans[order[k]].biased = k < n_biased;
  order = shuffled_indices(n, rng);
  for (std::size_t k = 0; k < n; ++k)
    plans[order[k]].answer_idx = static_cast<int>(k % static_cast<std::size_t>(spec.n_choices));
  return plans;
}

inline std::string qtype_of(QuestionKind k) {
  switch (k) {
    case QuestionKind::After:
    case QuestionKind::Before: return "temporal";
    case QuestionKind::Why: return "causal";
    case QuestionKind::Do: return "descriptive";
  }
  return {};
}

}  // namespace detail

// Builds one example following `plan`; deterministic in (spec, seed, plan).
inline SynthExample make_example(const ScenarioSpec& spec, std::uint64_t seed, const detail::Plan& plan,
                                 std::string id) {
  Rng rng(seed);
  const int nv = spec.n_frames;
  const int n_actions = static_cast<int>(spec.actions.size());
  std::uniform_int_distribution<int> actor_d(0, static_cast<int>(spec.actors.size()) - 1);
  std::uniform_int_distribution<int> action_d(0, n_actions - 1);
  const bool event_answer = plan.kind != QuestionKind::Do;
  if (event_answer && nv < 2) fail(Errc::BadSpec, "temporal and causal questions need >= 2 frames");

  for (int attempt = 0; attempt < 10000; ++attempt) {
    auto trace = sample_trace(spec, rng);
    int t = 0, target = 0;
    switch (plan.kind) {
      case QuestionKind::After:
        t = std::uniform_int_distribution<int>(0, nv - 2)(rng);
        target = t + 1;
        break;
      case QuestionKind::Before:
      case QuestionKind::Why:
        t = std::uniform_int_distribution<int>(1, nv - 1)(rng);
        target = t - 1;
        break;
      case QuestionKind::Do:
        t = std::uniform_int_distribution<int>(0, nv - 1)(rng);
        target = t;
        break;
    }
    auto& x = trace[static_cast<std::size_t>(t)];
    int plausible = -1;
    switch (plan.kind) {
      case QuestionKind::After: plausible = spec.effect_of(x.action); break;
      case QuestionKind::Before:
      case QuestionKind::Why: plausible = spec.cause_of(x.action); break;
      case QuestionKind::Do: plausible = spec.affordance[static_cast<std::size_t>(x.object)]; break;
    }
    auto other_action = [&] {
      int a;
      do a = action_d(rng);
      while (a == plausible);
      return a;
    };
    if (event_answer) {
      auto& e = trace[static_cast<std::size_t>(target)];
      if (!plan.biased) {
        e = Event{actor_d(rng), plausible, x.object, target};
      } else {
        e = random_event(spec, rng);
        e.t = target;
        if (e.action == plausible) e.action = other_action();
      }
    } else {
      x.action = plan.biased ? other_action() : plausible;
    }
    const Event query = trace[static_cast<std::size_t>(t)];

    // The question must identify a unique event.
    int matches = 0;
    for (const auto& e : trace)
      matches += event_answer ? detail::same_event(e, query)
                              : (e.actor == query.actor && e.object == query.object);
    if (matches != 1) continue;

    const std::string question = question_text(spec, plan.kind, query);
    const std::string answer = oracle_answer(spec, trace, question);
    auto is_plausible = [&](const Event& e) { return e.action == plausible && e.object == query.object; };

    std::vector<std::string> distractors;
    auto add = [&](const std::string& s) {
      if (s == answer || std::find(distractors.begin(), distractors.end(), s) != distractors.end())
        return;
      if (static_cast<int>(distractors.size()) < spec.n_choices - 1) distractors.push_back(s);
    };
    if (event_answer) {
      if (plan.biased) add(spec.event_text(Event{actor_d(rng), plausible, query.object, 0}));
      for (int k = 0; k < nv && static_cast<int>(distractors.size()) < 2 + plan.biased; ++k) {
        const auto& e = trace[static_cast<std::size_t>(k)];
        if (k == t || k == target || is_plausible(e)) continue;
        add(spec.event_text(e));
      }
      for (int guard = 0; static_cast<int>(distractors.size()) < spec.n_choices - 1 && guard < 10000; ++guard) {
        auto e = random_event(spec, rng);
        if (is_plausible(e)) continue;
        add(spec.event_text(e));
      }
    } else {
      if (plan.biased) add(spec.actions[static_cast<std::size_t>(plausible)]);
      for (int guard = 0; static_cast<int>(distractors.size()) < spec.n_choices - 1 && guard < 10000; ++guard) {
        const int a = action_d(rng);
        if (a == plausible) continue;
        add(spec.actions[static_cast<std::size_t>(a)]);
      }
    }
    if (static_cast<int>(distractors.size()) != spec.n_choices - 1) continue;
    std::shuffle(distractors.begin(), distractors.end(), rng);

    SynthExample ex;
    ex.id = std::move(id);
    ex.question = question;
    ex.qtype = detail::qtype_of(plan.kind);
    ex.is_biased = plan.biased;
    ex.answer_idx = plan.answer_idx;
    ex.choices.reserve(static_cast<std::size_t>(spec.n_choices));
    for (int c = 0, d = 0; c < spec.n_choices; ++c)
      ex.choices.push_back(c == plan.answer_idx ? answer : distractors[static_cast<std::size_t>(d++)]);
    for (int k = 0; k < nv; ++k) trace[static_cast<std::size_t>(k)].t = k;
    ex.trace = std::move(trace);
    ex.features = render_frames(spec, ex.trace, derive_seed(seed, 0xF7), "vid_" + ex.id);
    return ex;
  }
  fail(Errc::BadSpec, "could not realize a unique question; alphabets too small for n_frames");
}

// n examples, deterministic per (spec, seed); the val split takes
// round(val_fraction * n) examples of a seeded shuffle.
inline Dataset generate(const ScenarioSpec& spec, std::size_t n, std::uint64_t seed,
                        double val_fraction = 0.2) {
  spec.validate();
  if (spec.rules.empty() || spec.affordance.empty())
    fail(Errc::BadSpec, "generation needs causal rules and affordances");
  if (n == 0) fail(Errc::BadSpec, "n must be positive");
  Dataset ds;
  const auto plans = detail::make_plans(spec, n, seed);
  ds.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    ds.examples.push_back(make_example(spec, derive_seed(seed, 1000 + i), plans[i], "q" + std::to_string(i)));
  Rng rng(derive_seed(seed, 0x5917));
  auto order = detail::shuffled_indices(n, rng);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  ds.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  ds.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(ds.train.begin(), ds.train.end());
  std::sort(ds.val.begin(), ds.val.end());
  return ds;
}

inline std::vector<QAExample> qa_examples(const Dataset& ds, const std::vector<std::size_t>& split) {
  std::vector<QAExample> out;
  out.reserve(split.size());
  for (auto i : split) out.push_back(ds.examples[i].qa());
  return out;
}

// Question-conditioned answer-word frequencies: scores a choice by the
// smoothed log-frequency of its words among the answers seen for the same
// question in a reference corpus. Question words in `ignored` are dropped
// from the key, which pools questions that differ only in those words. Uses
// no visual information.
class TextPriorBaseline {
 public:
  TextPriorBaseline() = default;
  explicit TextPriorBaseline(std::set<std::string> ignored) : ignored_(std::move(ignored)) {}

  void fit(const std::vector<QAExample>& corpus) {
    for (const auto& ex : corpus) {
      const auto k = key(ex.question);
      auto& row = counts_[k];
      for (const auto& w : split_words(ex.choices[static_cast<std::size_t>(ex.answer_idx)])) {
        ++row[w];
        ++totals_[k];
        vocab_.insert(w);
      }
    }
  }

  double score(const std::string& question, const std::string& choice) const {
    const double v = static_cast<double>(std::max<std::size_t>(1, vocab_.size()));
    const auto k = key(question);
    auto it = counts_.find(k);
    double s = 0.0;
    for (const auto& w : split_words(choice)) {
      double c = 0.0, total = 0.0;
      if (it != counts_.end()) {
        auto jt = it->second.find(w);
        if (jt != it->second.end()) c = static_cast<double>(jt->second);
        total = static_cast<double>(totals_.at(k));
      }
      s += std::log((c + 0.5) / (total + 0.5 * v));
    }
    return s;
  }

  // Highest-scoring choice; ties go to the lowest index.
  int predict(const QAExample& ex) const {
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ex.choices.size(); ++i) {
      const double s = score(ex.question, ex.choices[i]);
      if (s > best_score) {
        best_score = s;
        best = static_cast<int>(i);
      }
    }
    return best;
  }

 private:
  std::string key(const std::string& question) const {
    std::string k;
    for (const auto& w : split_words(question)) k += ignored_.count(w) ? std::string("* ") : w + ' ';
    return k;
  }

  std::set<std::string> ignored_;
  std::map<std::string, std::map<std::string, std::size_t>> counts_;
  std::map<std::string, std::size_t> totals_;
  std::set<std::string> vocab_;
};

// The baseline for a world: actor names are pooled, so the key is the
// question's template, action and object.
inline TextPriorBaseline world_text_prior(const ScenarioSpec& spec, const std::vector<QAExample>& reference) {
  TextPriorBaseline b(std::set<std::string>(spec.actors.begin(), spec.actors.end()));
  b.fit(reference);
  return b;
}

// Index of the choice the world's rules make plausible from the question
// alone (rule successor / predecessor on the same object, or the object's
// typical action); -1 when no choice matches.
inline int rule_prior_choice(const ScenarioSpec& spec, const QAExample& ex) {
  const auto w = split_words(ex.question);
  int action = -1, object = -1;
  auto event_at = [&](std::size_t at) { return detail::parse_event(spec, w, at); };
  if (detail::starts_with(w, {"what", "happens", "after"})) {
    const auto x = event_at(3);
    action = spec.effect_of(x.action);
    object = x.object;
  } else if (detail::starts_with(w, {"what", "happens", "before"}) || detail::starts_with(w, {"why", "did"})) {
    const auto x = event_at(w[0] == "why" ? 2 : 3);
    action = spec.cause_of(x.action);
    object = x.object;
  } else if (w.size() == 6 && detail::starts_with(w, {"what", "did"})) {
    const int o = spec.object_index(w[5]);
    const auto& name = spec.actions[static_cast<std::size_t>(spec.affordance.at(static_cast<std::size_t>(o)))];
    for (std::size_t i = 0; i < ex.choices.size(); ++i)
      if (ex.choices[i] == name) return static_cast<int>(i);
    return -1;
  } else {
    fail(Errc::UnknownTemplate, "'" + ex.question + "'");
  }
  for (std::size_t i = 0; i < ex.choices.size(); ++i) {
    const auto c = split_words(ex.choices[i]);
    if (c.size() == 3 && c[1] == spec.actions[static_cast<std::size_t>(action)] &&
        c[2] == spec.objects[static_cast<std::size_t>(object)])
      return static_cast<int>(i);
  }
  return -1;
}

// Vocabulary covering every word the world's templates can emit.
inline Vocab world_vocab(const ScenarioSpec& spec) {
  std::vector<std::string> corpus{"what happens after before why did do with"};
  for (const auto* alphabet : {&spec.actors, &spec.actions, &spec.objects})
    for (const auto& w : *alphabet) corpus.push_back(w);
  return build_vocab(corpus, 4096, template_tokens());
}

// Word ids of each frame's event, for bag-of-words frame inputs.
inline std::vector<std::vector<std::int32_t>> frame_words(const ScenarioSpec& spec, const EventTrace& trace,
                                                          const Vocab& vocab) {
  std::vector<std::vector<std::int32_t>> out;
  for (const auto& e : trace) out.push_back(vocab.encode(spec.event_text(e)));
  return out;
}

// --- files -------------------------------------------------------------------

inline std::string trace_line(const ScenarioSpec& spec, const SynthExample& ex) {
  nlohmann::ordered_json j;
  j["video_ref"] = ex.features.video_id;
  nlohmann::ordered_json events = nlohmann::ordered_json::array();
  for (const auto& e : ex.trace)
    events.push_back({{"t", e.t},
                      {"actor", spec.actors[static_cast<std::size_t>(e.actor)]},
                      {"action", spec.actions[static_cast<std::size_t>(e.action)]},
                      {"object", spec.objects[static_cast<std::size_t>(e.object)]}});
  j["events"] = events;
  j["is_biased"] = ex.is_biased;
  return j.dump();
}

// Writes train.jsonl, val.jsonl, traces.jsonl and features/<video_ref>.fvqa.
inline void write_dataset(const std::filesystem::path& dir, const ScenarioSpec& spec, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "features");
  auto write_split = [&](const char* name, const std::vector<std::size_t>& split) {
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) fail(Errc::Io, "cannot write " + (dir / name).string());
    for (auto i : split) os << to_record_line(ds.examples[i].qa()) << '\n';
  };
  write_split("train.jsonl", ds.train);
  write_split("val.jsonl", ds.val);
  world_vocab(spec).save((dir / "vocab.txt").string());
  std::ofstream traces(dir / "traces.jsonl", std::ios::binary);
  for (const auto& ex : ds.examples) {
    traces << trace_line(spec, ex) << '\n';
    save_features((dir / "features" / (ex.features.video_id + ".fvqa")).string(), ex.features);
  }
}

inline FrameFeatureMatrix load_video(const std::filesystem::path& dataset_dir, const QAExample& ex) {
  auto x = load_features((dataset_dir / "features" / (ex.video_ref + ".fvqa")).string());
  x.video_id = ex.video_ref;
  return x;
}

}  // namespace fvqa

#pragma once

// The symbolic world behind synthetic videos: who can do what to which
// object, which actions tend to follow which, and how questions are mixed.

#include "fvqa/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fvqa {

struct Event {
  int actor = 0;
  int action = 0;
  int object = 0;
  int t = 0;

  friend bool operator==(const Event&, const Event&) = default;
};

using EventTrace = std::vector<Event>;

struct CausalRule {
  int cause = 0;   // action index
  int effect = 0;  // action index that follows, same object
  double prob = 0.0;
};

struct ScenarioSpec {
  std::vector<std::string> actors{"man", "woman", "boy", "girl"};
  std::vector<std::string> actions{"throws", "catches", "drops", "lifts",
                                   "opens",  "closes",  "pushes", "pulls"};
  std::vector<std::string> objects{"ball", "cup", "door", "box", "book", "bag"};
  // "cause>effect" pairs over action names; must form a permutation of the
  // action set so both the successor and the predecessor of every action are
  // well defined.
  std::vector<CausalRule> rules;
  // Per-object most typical action (the textual prior for descriptive questions).
  std::vector<int> affordance;
  double rule_prob = 0.8;
  double affordance_prob = 0.8;
  double frac_causal = 0.4;
  double frac_temporal = 0.4;
  double frac_descriptive = 0.2;
  double bias_rate = 0.3;
  int n_choices = 5;
  int n_frames = 4;
  int d_enc = 16;
  double noise = 0.05;
  std::uint64_t world_seed = 7;
  bool normalize_features = false;

  static ScenarioSpec defaults() {
    ScenarioSpec s;
    const std::vector<std::pair<std::string, std::string>> pairs{
        {"throws", "catches"}, {"catches", "drops"}, {"drops", "lifts"}, {"lifts", "throws"},
        {"opens", "closes"},   {"closes", "pushes"}, {"pushes", "pulls"}, {"pulls", "opens"}};
    for (const auto& [c, e] : pairs)
      s.rules.push_back({s.action_index(c), s.action_index(e), s.rule_prob});
    // ball:throws cup:lifts door:opens box:pushes book:drops bag:pulls
    s.affordance = {s.action_index("throws"), s.action_index("lifts"), s.action_index("opens"),
                    s.action_index("pushes"), s.action_index("drops"), s.action_index("pulls")};
    return s;
  }

  int action_index(const std::string& name) const { return index_of(actions, name, "action"); }
  int object_index(const std::string& name) const { return index_of(objects, name, "object"); }
  int actor_index(const std::string& name) const { return index_of(actors, name, "actor"); }

  // Successor action under the causal rules, or -1 if none.
  int effect_of(int action) const {
    for (const auto& r : rules)
      if (r.cause == action) return r.effect;
    return -1;
  }
  int cause_of(int action) const {
    for (const auto& r : rules)
      if (r.effect == action) return r.cause;
    return -1;
  }
  double prob_of(int action) const {
    for (const auto& r : rules)
      if (r.cause == action) return r.prob;
    return 0.0;
  }

  int symbol_count() const {
    return static_cast<int>(actors.size() + actions.size() + objects.size());
  }

  std::string event_text(const Event& e) const {
    return actors.at(static_cast<std::size_t>(e.actor)) + " " +
           actions.at(static_cast<std::size_t>(e.action)) + " " +
           objects.at(static_cast<std::size_t>(e.object));
  }

  // Throws BadSpec / EmptySpec describing the first violated constraint.
  void validate() const {
    if (actors.empty() || actions.empty() || objects.empty())
      fail(Errc::EmptySpec, "actor, action and object alphabets must be non-empty");
    const double total = frac_causal + frac_temporal + frac_descriptive;
    if (std::abs(total - 1.0) > 1e-9 || frac_causal < 0 || frac_temporal < 0 || frac_descriptive < 0)
      fail(Errc::BadSpec, "question-type fractions must be non-negative and sum to 1");
    if (bias_rate < 0.0 || bias_rate > 1.0) fail(Errc::BadSpec, "bias_rate must lie in [0,1]");
    if (n_choices < 2 || n_choices > 5) fail(Errc::BadSpec, "n_choices must lie in [2,5]");
    if (n_frames < 1) fail(Errc::BadSpec, "n_frames must be >= 1");
    if (d_enc < 1) fail(Errc::BadSpec, "d_enc must be >= 1");
    if (noise < 0) fail(Errc::BadSpec, "noise must be >= 0");
    if (!rules.empty()) {
      std::vector<int> cause_seen(actions.size(), 0), effect_seen(actions.size(), 0);
      for (const auto& r : rules) {
        if (r.cause < 0 || r.effect < 0 || r.cause >= static_cast<int>(actions.size()) ||
            r.effect >= static_cast<int>(actions.size()))
          fail(Errc::BadSpec, "rule references unknown action");
        if (r.prob < 0 || r.prob > 1) fail(Errc::BadSpec, "rule probability outside [0,1]");
        ++cause_seen[static_cast<std::size_t>(r.cause)];
        ++effect_seen[static_cast<std::size_t>(r.effect)];
      }
      for (std::size_t a = 0; a < actions.size(); ++a)
        if (cause_seen[a] != 1 || effect_seen[a] != 1)
          fail(Errc::BadSpec, "rules must form a permutation of the action set");
    }
    if (!affordance.empty() && affordance.size() != objects.size())
      fail(Errc::BadSpec, "affordance list must have one action per object");
  }

 private:
  static int index_of(const std::vector<std::string>& v, const std::string& name,
                      const char* what) {
    auto it = std::find(v.begin(), v.end(), name);
    if (it == v.end()) fail(Errc::BadSpec, std::string("unknown ") + what + " '" + name + "'");
    return static_cast<int>(it - v.begin());
  }
};

// Parses `key = value` lines ('#' starts a comment) into a map.
inline std::map<std::string, std::string> parse_key_values(std::istream& is,
                                                           const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos)
      fail(Errc::ConfigInvalid, origin + ":" + std::to_string(lineno) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::map<std::string, std::string> read_key_value_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(Errc::DataMissing, "cannot read " + path);
  return parse_key_values(is, path);
}

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    fail(Errc::ConfigInvalid, "'" + key + "' expects a number, got '" + v + "'");
  }
}

inline std::vector<std::string> words_of(const std::string& v) {
  std::vector<std::string> out;
  std::istringstream is(v);
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

}  // namespace detail

// Builds a ScenarioSpec from defaults overridden by key/value entries.
// Recognized keys: actors, actions, objects, rules (cause>effect ...),
// rule_prob, affordances (object:action ...), affordance_prob, mix
// (causal temporal descriptive), bias_rate, n_choices, n_frames, d_enc,
// noise, world_seed, normalize_features.
inline ScenarioSpec scenario_from_key_values(const std::map<std::string, std::string>& kv) {
  ScenarioSpec s = ScenarioSpec::defaults();
  std::vector<std::string> rule_words, affordance_words;
  bool alphabets_changed = false;
  for (const auto& [key, value] : kv) {
    using detail::to_double;
    if (key == "actors") {
      s.actors = detail::words_of(value);
      alphabets_changed = true;
    } else if (key == "actions") {
      s.actions = detail::words_of(value);
      alphabets_changed = true;
    } else if (key == "objects") {
      s.objects = detail::words_of(value);
      alphabets_changed = true;
    } else if (key == "rules") {
      rule_words = detail::words_of(value);
    } else if (key == "affordances") {
      affordance_words = detail::words_of(value);
    } else if (key == "rule_prob") {
      s.rule_prob = to_double(key, value);
    } else if (key == "affordance_prob") {
      s.affordance_prob = to_double(key, value);
    } else if (key == "mix") {
      auto w = detail::words_of(value);
      if (w.size() != 3) fail(Errc::ConfigInvalid, "mix expects three fractions");
      s.frac_causal = to_double(key, w[0]);
      s.frac_temporal = to_double(key, w[1]);
      s.frac_descriptive = to_double(key, w[2]);
    } else if (key == "bias_rate") {
      s.bias_rate = to_double(key, value);
    } else if (key == "n_choices") {
      s.n_choices = static_cast<int>(to_double(key, value));
    } else if (key == "n_frames") {
      s.n_frames = static_cast<int>(to_double(key, value));
    } else if (key == "d_enc") {
      s.d_enc = static_cast<int>(to_double(key, value));
    } else if (key == "noise") {
      s.noise = to_double(key, value);
    } else if (key == "world_seed") {
      s.world_seed = static_cast<std::uint64_t>(to_double(key, value));
    } else if (key == "normalize_features") {
      s.normalize_features = value == "true" || value == "1";
    } else {
      fail(Errc::ConfigInvalid, "unknown scenario key '" + key + "'");
    }
  }
  if (alphabets_changed && rule_words.empty()) s.rules.clear();
  if (alphabets_changed && affordance_words.empty()) s.affordance.clear();
  if (!rule_words.empty()) {
    s.rules.clear();
    for (const auto& w : rule_words) {
      auto gt = w.find('>');
      if (gt == std::string::npos) fail(Errc::ConfigInvalid, "rule '" + w + "' is not cause>effect");
      s.rules.push_back({s.action_index(w.substr(0, gt)), s.action_index(w.substr(gt + 1)), 0.0});
    }
  }
  for (auto& r : s.rules) r.prob = s.rule_prob;
  if (!affordance_words.empty()) {
    s.affordance.assign(s.objects.size(), -1);
    for (const auto& w : affordance_words) {
      auto colon = w.find(':');
      if (colon == std::string::npos)
        fail(Errc::ConfigInvalid, "affordance '" + w + "' is not object:action");
      s.affordance[static_cast<std::size_t>(s.object_index(w.substr(0, colon)))] =
          s.action_index(w.substr(colon + 1));
    }
    if (std::count(s.affordance.begin(), s.affordance.end(), -1) != 0)
      fail(Errc::ConfigInvalid, "every object needs an affordance");
  }
  s.validate();
  return s;
}

}  // namespace fvqa

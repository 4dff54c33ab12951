#pragma once

// Word-level vocabulary and the three prompt arrangements used for training:
//
//   VQA  [SOS] Video: <v..> Question: q Choices: (A).. Answer: The answer is {a [EOS]}
//   VAQ  [SOS] Video: <v..> Choices: (A).. Answer: The answer is a [EOS] Question: {q [EOS]}
//   QAV  [SOS] Question: q Choices: (A).. Answer: The answer is a Video: {<v..>}
//
// Braces mark the loss-masked target block; everything before it is prefix.

#include "fvqa/core.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace fvqa {

inline constexpr std::int32_t kSos = 0;
inline constexpr std::int32_t kEos = 1;
inline constexpr std::int32_t kPad = 2;
inline constexpr int kMaxChoices = 5;

inline const std::array<std::string, 3>& special_tokens() {
  static const std::array<std::string, 3> s{"[SOS]", "[EOS]", "[PAD]"};
  return s;
}

// Template words; reserved directly after the specials when building a
// dataset vocabulary so every prompt is encodable.
inline const std::vector<std::string>& template_tokens() {
  static const std::vector<std::string> t{"Video:", "Question:", "Choices:", "(A)", "(B)", "(C)",
                                          "(D)",    "(E)",       "Answer:",  "The", "answer", "is"};
  return t;
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string w; is >> w;) out.push_back(std::move(w));
  return out;
}

class Vocab {
 public:
  Vocab() : tokens_(special_tokens().begin(), special_tokens().end()) { reindex(); }

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 4) fail(Errc::MaxSizeTooSmall, "vocab needs at least 4 entries");
    for (std::size_t i = 0; i < 3; ++i)
      if (tokens_[i] != special_tokens()[i]) fail(Errc::BadHeader, "specials must occupy ids 0..2");
    reindex();
    if (index_.size() != tokens_.size()) fail(Errc::BadHeader, "duplicate token in vocab");
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::int32_t id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) fail(Errc::UnknownToken, "'" + token + "' not in vocab");
    return it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      fail(Errc::UnknownId, "id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<std::int32_t> encode(const std::string& text) const {
    std::vector<std::int32_t> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) fail(Errc::Io, "cannot write " + path);
    for (const auto& t : tokens_) os << t << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail(Errc::Io, "cannot read " + path);
    std::vector<std::string> tokens;
    for (std::string line; std::getline(is, line);) tokens.push_back(line);
    return Vocab(std::move(tokens));
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// Specials first, then `reserved` in the given order, then corpus words by
// (frequency desc, lexicographic asc), truncated to max_size entries.
inline Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_size,
                         const std::vector<std::string>& reserved = {}) {
  if (corpus.empty()) fail(Errc::EmptyCorpus, "corpus has no texts");
  if (max_size < 4) fail(Errc::MaxSizeTooSmall, "max_size must be >= 4");
  std::map<std::string, std::size_t> freq;
  for (const auto& text : corpus)
    for (const auto& w : split_words(text)) ++freq[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens(special_tokens().begin(), special_tokens().end());
  auto push = [&](const std::string& w) {
    if (tokens.size() >= max_size) return;
    if (std::find(tokens.begin(), tokens.end(), w) == tokens.end()) tokens.push_back(w);
  };
  for (const auto& w : reserved) push(w);
  for (const auto& [w, n] : ranked) push(w);
  if (tokens.size() < 4) fail(Errc::MaxSizeTooSmall, "corpus yields fewer than 4 vocab entries");
  return Vocab(std::move(tokens));
}

// Drops specials and joins the remaining words with single spaces.
inline std::string decode(const std::vector<std::int32_t>& ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    const auto& tok = vocab.token(id);
    if (id == kSos || id == kEos || id == kPad) continue;
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

enum class Segment : std::uint8_t { VisualPlaceholder, Template, Question, Choices, AnswerText, Eos };
enum class Arrangement : std::uint8_t { VQA, VAQ, QAV };

inline std::string_view arrangement_name(Arrangement a) {
  switch (a) {
    case Arrangement::VQA: return "vqa";
    case Arrangement::VAQ: return "vaq";
    case Arrangement::QAV: return "qav";
  }
  return "?";
}

struct QAExample {
  std::string id;
  std::string video_ref;
  std::string question;
  std::vector<std::string> choices;
  int answer_idx = 0;
  std::string qtype;

  friend bool operator==(const QAExample&, const QAExample&) = default;
};

struct PromptLayout {
  std::vector<std::int32_t> ids;
  std::vector<Segment> segments;
  std::vector<bool> loss_mask;
  std::size_t visual_begin = 0;
  std::size_t visual_count = 0;
  Arrangement arrangement = Arrangement::VQA;

  std::size_t size() const { return ids.size(); }
  bool has_video() const { return visual_count > 0; }

  friend bool operator==(const PromptLayout&, const PromptLayout&) = default;
};

namespace detail {

class LayoutBuilder {
 public:
  LayoutBuilder(const Vocab& vocab, Arrangement arrangement) : vocab_(vocab) {
    layout_.arrangement = arrangement;
  }

  void word(const std::string& w, Segment seg, bool target = false) {
    push(vocab_.id(w), seg, target);
  }
  void text(const std::string& t, Segment seg, bool target = false) {
    for (const auto& w : split_words(t)) word(w, seg, target);
  }
  void special(std::int32_t id, Segment seg, bool target = false) { push(id, seg, target); }
  void video(std::size_t n_v, bool target) {
    word("Video:", Segment::Template);
    layout_.visual_begin = layout_.ids.size();
    layout_.visual_count = n_v;
    for (std::size_t i = 0; i < n_v; ++i) push(kPad, Segment::VisualPlaceholder, target);
  }
  void choices(const std::vector<std::string>& choices) {
    static const char* labels[] = {"(A)", "(B)", "(C)", "(D)", "(E)"};
    word("Choices:", Segment::Template);
    for (std::size_t i = 0; i < choices.size(); ++i) {
      word(labels[i], Segment::Choices);
      text(choices[i], Segment::Choices);
    }
  }
  void answer_prefix() {
    word("Answer:", Segment::Template);
    text("The answer is", Segment::Template);
  }

  PromptLayout finish(std::size_t max_len) && {
    if (layout_.ids.size() > max_len)
      fail(Errc::TooLong, std::to_string(layout_.ids.size()) + " tokens exceed max " +
                              std::to_string(max_len));
    return std::move(layout_);
  }

 private:
  void push(std::int32_t id, Segment seg, bool target) {
    layout_.ids.push_back(id);
    layout_.segments.push_back(seg);
    layout_.loss_mask.push_back(target);
  }

  const Vocab& vocab_;
  PromptLayout layout_;
};

inline void check_example(const QAExample& ex) {
  if (ex.choices.empty() || ex.choices.size() > static_cast<std::size_t>(kMaxChoices))
    fail(Errc::BadChoiceCount, "example " + ex.id + " has " + std::to_string(ex.choices.size()) +
                                   " choices");
  if (ex.answer_idx < 0 || static_cast<std::size_t>(ex.answer_idx) >= ex.choices.size())
    fail(Errc::BadAnswerIndex, "example " + ex.id);
  if (split_words(ex.question).empty()) fail(Errc::EmptyMask, "example " + ex.id + " has no question");
}

}  // namespace detail

inline constexpr std::size_t kUnlimited = static_cast<std::size_t>(-1);

inline PromptLayout encode_prompt(const QAExample& ex, Arrangement arrangement, const Vocab& vocab,
                                  std::size_t n_v, std::size_t max_len = kUnlimited) {
  detail::check_example(ex);
  if (n_v < 1) fail(Errc::MissingVisualSlots, "n_v must be >= 1");
  const auto& answer = ex.choices[static_cast<std::size_t>(ex.answer_idx)];
  detail::LayoutBuilder b(vocab, arrangement);
  b.special(kSos, Segment::Template);
  switch (arrangement) {
    case Arrangement::VQA:
      b.video(n_v, false);
      b.word("Question:", Segment::Template);
      b.text(ex.question, Segment::Question);
      b.choices(ex.choices);
      b.answer_prefix();
      b.text(answer, Segment::AnswerText, true);
      b.special(kEos, Segment::Eos, true);
      break;
    case Arrangement::VAQ:
      b.video(n_v, false);
      b.choices(ex.choices);
      b.answer_prefix();
      b.text(answer, Segment::AnswerText);
      b.special(kEos, Segment::Eos);
      b.word("Question:", Segment::Template);
      b.text(ex.question, Segment::Question, true);
      b.special(kEos, Segment::Eos, true);
      break;
    case Arrangement::QAV:
      b.word("Question:", Segment::Template);
      b.text(ex.question, Segment::Question);
      b.choices(ex.choices);
      b.answer_prefix();
      b.text(answer, Segment::AnswerText);
      b.video(n_v, true);
      break;
  }
  return std::move(b).finish(max_len);
}

// VQA prompt with the "Video:" line removed entirely; used by the QA-only
// model that defines the text-prior prediction.
inline PromptLayout encode_qa_only(const QAExample& ex, const Vocab& vocab,
                                   std::size_t max_len = kUnlimited) {
  detail::check_example(ex);
  const auto& answer = ex.choices[static_cast<std::size_t>(ex.answer_idx)];
  detail::LayoutBuilder b(vocab, Arrangement::VQA);
  b.special(kSos, Segment::Template);
  b.word("Question:", Segment::Template);
  b.text(ex.question, Segment::Question);
  b.choices(ex.choices);
  b.answer_prefix();
  b.text(answer, Segment::AnswerText, true);
  b.special(kEos, Segment::Eos, true);
  return std::move(b).finish(max_len);
}

// Right-pads to `length` with PAD; padded positions never carry loss.
inline PromptLayout pad_to(PromptLayout layout, std::size_t length) {
  while (layout.ids.size() < length) {
    layout.ids.push_back(kPad);
    layout.segments.push_back(Segment::Template);
    layout.loss_mask.push_back(false);
  }
  return layout;
}

// Human-readable rendering that mirrors the tabular prompt layout: one line
// per template field, visual slots shown as <v1>..<vN>.
inline std::string render(const PromptLayout& layout, const Vocab& vocab) {
  std::string out;
  bool line_start = true;
  auto emit = [&](const std::string& w) {
    if (!line_start) out += ' ';
    out += w;
    line_start = false;
  };
  auto newline = [&] {
    if (!out.empty()) out += '\n';
    line_start = true;
  };
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto id = layout.ids[i];
    if (layout.segments[i] == Segment::VisualPlaceholder) {
      emit("<v" + std::to_string(i - layout.visual_begin + 1) + ">");
      continue;
    }
    const auto& tok = vocab.token(id);
    const bool breaks = tok == "Question:" || tok == "Choices:" || tok == "Answer:" ||
                        (tok == "Video:" && i > 1) ||
                        (layout.segments[i] == Segment::Choices && tok.size() == 3 &&
                         tok.front() == '(' && tok.back() == ')');
    if (breaks) newline();
    emit(tok);
  }
  out += '\n';
  return out;
}

// --- dataset records -------------------------------------------------------

inline std::string to_record_line(const QAExample& ex) {
  nlohmann::ordered_json j;
  j["id"] = ex.id;
  j["video_ref"] = ex.video_ref;
  j["question"] = ex.question;
  j["choices"] = ex.choices;
  j["answer_idx"] = ex.answer_idx;
  j["qtype"] = ex.qtype;
  return j.dump();
}

inline QAExample example_from_json(const nlohmann::json& j) {
  QAExample ex;
  try {
    ex.id = j.at("id").get<std::string>();
    ex.video_ref = j.at("video_ref").get<std::string>();
    ex.question = j.at("question").get<std::string>();
    ex.choices = j.at("choices").get<std::vector<std::string>>();
    ex.answer_idx = j.at("answer_idx").get<int>();
    ex.qtype = j.at("qtype").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::Corrupt, std::string("bad dataset record: ") + e.what());
  }
  if (ex.qtype != "causal" && ex.qtype != "temporal" && ex.qtype != "descriptive")
    fail(Errc::Corrupt, "unknown qtype '" + ex.qtype + "'");
  detail::check_example(ex);
  return ex;
}

inline void save_dataset(const std::string& path, const std::vector<QAExample>& examples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::Io, "cannot write " + path);
  for (const auto& ex : examples) os << to_record_line(ex) << '\n';
}

inline std::vector<QAExample> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(Errc::DataMissing, "cannot read " + path);
  std::vector<QAExample> out;
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::Corrupt, path + ": " + e.what());
    }
    out.push_back(example_from_json(j));
  }
  return out;
}

// Corpus lines for vocab building: every question and every choice.
inline std::vector<std::string> corpus_of(const std::vector<QAExample>& examples) {
  std::vector<std::string> corpus;
  for (const auto& ex : examples) {
    corpus.push_back(ex.question);
    for (const auto& c : ex.choices) corpus.push_back(c);
  }
  return corpus;
}

inline Vocab build_dataset_vocab(const std::vector<QAExample>& examples, std::size_t max_size) {
  return build_vocab(corpus_of(examples), max_size, template_tokens());
}

}  // namespace fvqa

#pragma once

// Linguistic shortcut / bias decomposition and the attention and
// embedding-alignment diagnostics.
//
// With Y the label, Y_vq the prediction of the video+question model and Y_q
// the prediction of a question-only model:
//   shortcut_acc = P(Y_vq = Y | Y_q = Y)     (text prior right)
//   bias_acc     = P(Y_vq = Y | Y_q != Y)    (text prior wrong)
// and overall = shortcut_acc * P(Y_q = Y) + bias_acc * P(Y_q != Y).

#include "fvqa/core.hpp"
#include "fvqa/model.hpp"
#include "fvqa/objectives.hpp"

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fvqa {

struct PredictionRecord {
  std::string id;
  std::string qtype;
  int y_true = 0;
  int y_vqa = -1;
  int y_qa = -1;
  std::vector<double> scores_vqa;
  std::vector<double> scores_qa;
};

// Counts over the 2x2 partition (text prior right/wrong) x (V+Q model right/wrong).
struct BiasCell {
  std::size_t prior_right = 0, prior_right_vqa_right = 0;
  std::size_t prior_wrong = 0, prior_wrong_vqa_right = 0;

  std::size_t total() const { return prior_right + prior_wrong; }
  std::size_t vqa_right() const { return prior_right_vqa_right + prior_wrong_vqa_right; }

  // Empty conditioning cells yield nullopt rather than a number.
  std::optional<double> shortcut_acc() const {
    if (prior_right == 0) return std::nullopt;
    return static_cast<double>(prior_right_vqa_right) / static_cast<double>(prior_right);
  }
  std::optional<double> bias_acc() const {
    if (prior_wrong == 0) return std::nullopt;
    return static_cast<double>(prior_wrong_vqa_right) / static_cast<double>(prior_wrong);
  }
  double overall_acc() const {
    return total() ? static_cast<double>(vqa_right()) / static_cast<double>(total()) : 0.0;
  }
  double prior_acc() const {
    return total() ? static_cast<double>(prior_right) / static_cast<double>(total()) : 0.0;
  }

  // overall = shortcut * P(prior right) + bias * P(prior wrong) as rationals:
  //   (a/r)(r/n) + (b/w)(w/n) = (a+b)/n  <=>  a*r*w*n + b*w*r*n == (a+b)*r*w*n  (r, w > 0)
  bool total_probability_holds() const {
    using u128 = unsigned __int128;
    const u128 a = prior_right_vqa_right, r = prior_right, b = prior_wrong_vqa_right, w = prior_wrong;
    const u128 n = total();
    if (n == 0) return true;
    if (r == 0) return b == vqa_right() && w == n;
    if (w == 0) return a == vqa_right() && r == n;
    return a * r * w * n + b * w * r * n == static_cast<u128>(vqa_right()) * r * w * n;
  }
};

struct BiasReport {
  BiasCell all;
  std::map<std::string, BiasCell> per_qtype;
};

inline void add_record(BiasCell& c, const PredictionRecord& r) {
  const bool vqa_ok = r.y_vqa == r.y_true;
  if (r.y_qa == r.y_true) {
    ++c.prior_right;
    c.prior_right_vqa_right += vqa_ok;
  } else {
    ++c.prior_wrong;
    c.prior_wrong_vqa_right += vqa_ok;
  }
}

inline BiasReport bias_report(const std::vector<PredictionRecord>& records) {
  if (records.empty()) fail(Errc::EmptyRecords, "bias report needs at least one record");
  BiasReport rep;
  for (const auto& r : records) {
    add_record(rep.all, r);
    add_record(rep.per_qtype[r.qtype], r);
  }
  return rep;
}

inline nlohmann::ordered_json to_json(const BiasCell& c) {
  auto rate = [](std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json("undefined"); };
  return {{"n", c.total()},
          {"prior_right", c.prior_right},
          {"prior_right_vqa_right", c.prior_right_vqa_right},
          {"prior_wrong", c.prior_wrong},
          {"prior_wrong_vqa_right", c.prior_wrong_vqa_right},
          {"shortcut_acc", rate(c.shortcut_acc())},
          {"bias_acc", rate(c.bias_acc())},
          {"overall_acc", c.overall_acc()},
          {"prior_acc", c.prior_acc()},
          {"total_probability_holds", c.total_probability_holds()}};
}

inline nlohmann::ordered_json to_json(const BiasReport& r) {
  nlohmann::ordered_json j;
  j["all"] = to_json(r.all);
  for (const auto& [k, c] : r.per_qtype) j["per_qtype"][k] = to_json(c);
  return j;
}

inline std::string format_report(const BiasReport& r) {
  auto pct = [](std::optional<double> v) {
    if (!v) return std::string("undefined");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * *v);
    return std::string(buf);
  };
  std::string out;
  auto line = [&](const std::string& name, const BiasCell& c) {
    out += name + ": n=" + std::to_string(c.total()) + " overall=" + pct(c.overall_acc()) +
           " shortcut=" + pct(c.shortcut_acc()) + " (" + std::to_string(c.prior_right) + ")" +
           " bias=" + pct(c.bias_acc()) + " (" + std::to_string(c.prior_wrong) + ")\n";
  };
  line("all", r.all);
  for (const auto& [k, c] : r.per_qtype) line(k, c);
  return out;
}

// --- prediction logs -------------------------------------------------------

inline std::string prediction_line(const PredictionRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["qtype"] = r.qtype;
  j["y_true"] = r.y_true;
  j["y_vqa"] = r.y_vqa >= 0 ? nlohmann::json(r.y_vqa) : nlohmann::json(nullptr);
  j["y_qa_only"] = r.y_qa >= 0 ? nlohmann::json(r.y_qa) : nlohmann::json(nullptr);
  j["scores_vqa"] = r.scores_vqa;
  j["scores_qa"] = r.scores_qa;
  return j.dump();
}

inline void save_predictions(const std::string& path, const std::vector<PredictionRecord>& rs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::Io, "cannot write " + path);
  for (const auto& r : rs) os << prediction_line(r) << '\n';
}

inline std::vector<PredictionRecord> load_predictions(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(Errc::DataMissing, "cannot read " + path);
  std::vector<PredictionRecord> out;
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PredictionRecord r;
      r.id = j.at("id");
      r.qtype = j.at("qtype");
      r.y_true = j.at("y_true");
      r.y_vqa = j.at("y_vqa").is_null() ? -1 : j.at("y_vqa").get<int>();
      r.y_qa = j.at("y_qa_only").is_null() ? -1 : j.at("y_qa_only").get<int>();
      r.scores_vqa = j.value("scores_vqa", std::vector<double>{});
      r.scores_qa = j.value("scores_qa", std::vector<double>{});
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::Corrupt, path + ": " + e.what());
    }
  }
  return out;
}

// Joins a V+Q log and a Q-only log on id; ids missing from either side are an error.
inline std::vector<PredictionRecord> join_predictions(const std::vector<PredictionRecord>& vqa,
                                                      const std::vector<PredictionRecord>& qa) {
  std::map<std::string, const PredictionRecord*> by_id;
  for (const auto& r : qa) by_id[r.id] = &r;
  std::vector<PredictionRecord> out;
  for (const auto& r : vqa) {
    auto it = by_id.find(r.id);
    if (it == by_id.end()) fail(Errc::Corrupt, "id " + r.id + " missing from the question-only log");
    if (it->second->y_true != r.y_true) fail(Errc::Corrupt, "labels disagree for id " + r.id);
    PredictionRecord j = r;
    j.y_qa = it->second->y_qa;
    j.scores_qa = it->second->scores_qa;
    out.push_back(std::move(j));
  }
  if (out.size() != qa.size()) fail(Errc::Corrupt, "logs cover different example sets");
  return out;
}

// --- attention --------------------------------------------------------------

// Mean over (layer, head, query) of the sequence-attention probability mass
// that each query row puts on key columns [visual_begin, visual_begin + visual_count).
// `probs[k]` are the row-stochastic sequence attention maps.
template <typename T>
double visual_attention_mass(const std::vector<const Mat<T>*>& probs, const std::vector<std::size_t>& queries,
                             std::size_t visual_begin, std::size_t visual_count) {
  if (visual_count == 0) fail(Errc::NoVisualSlots, "no visual key positions");
  if (queries.empty() || probs.empty()) fail(Errc::EmptyBatch, "no queries to average over");
  double sum = 0.0;
  for (const auto* p : probs)
    for (auto q : queries)
      sum += static_cast<double>(
          p->row(static_cast<Eigen::Index>(q))
              .segment(static_cast<Eigen::Index>(visual_begin), static_cast<Eigen::Index>(visual_count))
              .sum());
  return sum / static_cast<double>(probs.size() * queries.size());
}

// Answer-token queries of one recorded VQA forward pass.
template <typename T>
double answer_visual_attention(const ForwardPass<T>& fp) {
  if (fp.visual_count == 0) fail(Errc::NoVisualSlots, "layout has no visual slots");
  std::vector<std::size_t> queries;
  for (std::size_t t = 0; t < fp.length(); ++t)
    if (fp.segments[t] == Segment::AnswerText) queries.push_back(t);
  std::vector<const Mat<T>*> probs;
  for (const auto& layer : fp.layers)
    for (const auto& p : layer.probs_seq) probs.push_back(&p);
  return visual_attention_mass(probs, queries, fp.visual_begin, fp.visual_count);
}

// Mean answer-to-visual attention over a batch of VQA samples.
template <typename T>
double attention_trace(const ModelParams<T>& model, const std::vector<Sample<T>>& batch) {
  if (batch.empty()) fail(Errc::EmptyBatch, "attention trace over an empty batch");
  double sum = 0.0;
  for (const auto& s : batch) {
    require_arrangement(s.layout, Arrangement::VQA);
    if (!s.layout.has_video()) fail(Errc::NoVisualSlots, "layout has no visual slots");
    sum += answer_visual_attention(forward(model, s.layout, visual_tokens(model, s)));
  }
  return sum / static_cast<double>(batch.size());
}

// --- embedding alignment ----------------------------------------------------

struct AlignmentStats {
  double centroid_distance = 0.0;  // ||mean(visual) - mean(text)||
  double mean_nearest_text = 0.0;  // mean over visual rows of the distance to the closest text row
};

template <typename T>
AlignmentStats alignment_stats(const Mat<T>& visual, const Mat<T>& text) {
  if (visual.rows() == 0 || text.rows() == 0) fail(Errc::EmptyBatch, "need visual and text tokens");
  if (visual.cols() != text.cols()) fail(Errc::DimMismatch, "visual and text widths differ");
  AlignmentStats s;
  const RowVec<double> cv = visual.template cast<double>().colwise().mean();
  const RowVec<double> ct = text.template cast<double>().colwise().mean();
  s.centroid_distance = (cv - ct).norm();
  for (Eigen::Index i = 0; i < visual.rows(); ++i) {
    const RowVec<double> v = visual.row(i).template cast<double>();
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < text.rows(); ++j)
      best = std::min(best, (text.row(j).template cast<double>() - v).norm());
    s.mean_nearest_text += best;
  }
  s.mean_nearest_text /= static_cast<double>(visual.rows());
  return s;
}

// Projected frames of the batch against the embeddings of the batch's text tokens.
template <typename T>
AlignmentStats alignment_stats(const ModelParams<T>& model, const std::vector<Sample<T>>& batch) {
  if (batch.empty()) fail(Errc::EmptyBatch, "alignment over an empty batch");
  std::vector<RowVec<T>> vis, txt;
  for (const auto& s : batch) {
    const Mat<T> v = visual_tokens(model, s);
    for (Eigen::Index i = 0; i < v.rows(); ++i) vis.push_back(v.row(i));
    for (std::size_t t = 0; t < s.layout.size(); ++t)
      if (s.layout.segments[t] != Segment::VisualPlaceholder) txt.push_back(model.tok_emb.row(s.layout.ids[t]));
  }
  auto stack = [&](const std::vector<RowVec<T>>& rows) {
    Mat<T> m(static_cast<Eigen::Index>(rows.size()), model.config.d_model);
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i];
    return m;
  };
  return alignment_stats(stack(vis), stack(txt));
}

}  // namespace fvqa

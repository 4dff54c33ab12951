#pragma once

// Frozen per-frame features and the learnable projection into the model's
// token-embedding space.
//
// Feature file layout (little-endian):
//   bytes 0..3   "FVQA"
//   u32          version (1)
//   u32          N_v
//   u32          D_enc
//   f32[N_v*D_enc] row-major values

#include "fvqa/core.hpp"
#include "fvqa/scenario.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace fvqa {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian hosts");

inline constexpr char kFeatureMagic[4] = {'F', 'V', 'Q', 'A'};
inline constexpr std::uint32_t kFeatureVersion = 1;

struct FrameFeatureMatrix {
  std::string video_id;
  Mat<float> values;  // N_v x D_enc

  Eigen::Index frames() const { return values.rows(); }
  Eigen::Index dim() const { return values.cols(); }
};

inline void validate_features(const FrameFeatureMatrix& x) {
  if (x.frames() < 1) fail(Errc::ShapeMismatch, "feature matrix needs at least one frame");
  if (!x.values.allFinite()) fail(Errc::NonFiniteValue, "feature matrix contains NaN/Inf");
  for (Eigen::Index i = 0; i < x.frames(); ++i)
    if (x.values.row(i).squaredNorm() == 0.0f)
      fail(Errc::ShapeMismatch, "frame " + std::to_string(i) + " is an all-zero row");
}

inline void save_features(const std::string& path, const FrameFeatureMatrix& x) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::Io, "cannot write " + path);
  const std::uint32_t header[3] = {kFeatureVersion, static_cast<std::uint32_t>(x.frames()),
                                   static_cast<std::uint32_t>(x.dim())};
  os.write(kFeatureMagic, 4);
  os.write(reinterpret_cast<const char*>(header), sizeof header);
  os.write(reinterpret_cast<const char*>(x.values.data()),
           static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(x.values.size())));
  if (!os) fail(Errc::Io, "short write to " + path);
}

inline FrameFeatureMatrix load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::DataMissing, "cannot read " + path);
  char magic[4];
  std::uint32_t header[3];
  if (!is.read(magic, 4) || std::memcmp(magic, kFeatureMagic, 4) != 0)
    fail(Errc::BadHeader, path + ": missing FVQA magic");
  if (!is.read(reinterpret_cast<char*>(header), sizeof header))
    fail(Errc::BadHeader, path + ": truncated header");
  if (header[0] != kFeatureVersion)
    fail(Errc::BadHeader, path + ": unsupported version " + std::to_string(header[0]));
  if (header[1] == 0 || header[2] == 0) fail(Errc::BadHeader, path + ": zero-sized shape");
  FrameFeatureMatrix x;
  x.video_id = path;
  x.values.resize(header[1], header[2]);
  const auto bytes = static_cast<std::streamsize>(sizeof(float) * header[1] * header[2]);
  if (!is.read(reinterpret_cast<char*>(x.values.data()), bytes))
    fail(Errc::ShapeMismatch, path + ": payload shorter than header shape");
  if (is.peek() != std::char_traits<char>::eof())
    fail(Errc::ShapeMismatch, path + ": trailing bytes after payload");
  if (!x.values.allFinite()) fail(Errc::NonFiniteValue, path + ": NaN/Inf in payload");
  validate_features(x);
  return x;
}

// v = x W + b, the learnable map f from encoder space to the embedding space.
template <typename T>
struct ProjectionParams {
  Mat<T> weight;  // D_enc x D
  Mat<T> bias;    // 1 x D

  Eigen::Index in_dim() const { return weight.rows(); }
  Eigen::Index out_dim() const { return weight.cols(); }
};

template <typename T>
Mat<T> project(const ProjectionParams<T>& p, const Mat<T>& x) {
  if (x.cols() != p.in_dim())
    fail(Errc::DimMismatch, "features have D_enc=" + std::to_string(x.cols()) +
                                " but projection expects " + std::to_string(p.in_dim()));
  Mat<T> v = x * p.weight;
  v.rowwise() += p.bias.row(0);
  return v;
}

template <typename T>
Mat<T> project(const ProjectionParams<T>& p, const FrameFeatureMatrix& x) {
  return project(p, Mat<T>(x.values.template cast<T>()));
}

// Accumulates dL/dW and dL/db given dL/dv; x is the (frozen) input. An
// empty bias gradient means the bias is not being trained.
template <typename T>
void project_backward(const Mat<T>& x, const Mat<T>& dv, ProjectionParams<T>& grad) {
  grad.weight.noalias() += x.transpose() * dv;
  if (grad.bias.size() > 0) grad.bias.row(0) += dv.colwise().sum();
}

// --- synthetic frames ------------------------------------------------------

// Fixed per-symbol encoder embeddings of a world; rows have unit expected norm.
struct SymbolEmbeddings {
  Mat<double> actors, actions, objects;

  static SymbolEmbeddings of(const ScenarioSpec& spec) {
    Rng rng(derive_seed(spec.world_seed, 0xE4B));
    const double sd = 1.0 / std::sqrt(static_cast<double>(spec.d_enc));
    SymbolEmbeddings e;
    e.actors = gaussian<double>(static_cast<Eigen::Index>(spec.actors.size()), spec.d_enc, sd, rng);
    e.actions = gaussian<double>(static_cast<Eigen::Index>(spec.actions.size()), spec.d_enc, sd, rng);
    e.objects = gaussian<double>(static_cast<Eigen::Index>(spec.objects.size()), spec.d_enc, sd, rng);
    return e;
  }
};

// Frame t = actor + action + object embedding + N(0, noise^2) per entry.
inline FrameFeatureMatrix render_frames(const ScenarioSpec& spec, const EventTrace& trace,
                                        std::uint64_t seed, std::string video_id = {}) {
  const auto emb = SymbolEmbeddings::of(spec);
  Rng rng(derive_seed(seed, 0xF4A));
  std::normal_distribution<double> noise(0.0, 1.0);
  FrameFeatureMatrix x;
  x.video_id = std::move(video_id);
  x.values.resize(static_cast<Eigen::Index>(trace.size()), spec.d_enc);
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const auto& e = trace[t];
    RowVec<double> row = emb.actors.row(e.actor) + emb.actions.row(e.action) + emb.objects.row(e.object);
    for (Eigen::Index j = 0; j < row.size(); ++j) row(j) += spec.noise * noise(rng);
    if (spec.normalize_features) row /= row.norm();
    x.values.row(static_cast<Eigen::Index>(t)) = row.cast<float>();
  }
  return x;
}

inline Event random_event(const ScenarioSpec& spec, Rng& rng) {
  std::uniform_int_distribution<int> actor(0, static_cast<int>(spec.actors.size()) - 1);
  std::uniform_int_distribution<int> action(0, static_cast<int>(spec.actions.size()) - 1);
  std::uniform_int_distribution<int> object(0, static_cast<int>(spec.objects.size()) - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Event e;
  e.actor = actor(rng);
  e.object = object(rng);
  if (!spec.affordance.empty() && u(rng) < spec.affordance_prob)
    e.action = spec.affordance[static_cast<std::size_t>(e.object)];
  else
    e.action = action(rng);
  return e;
}

// Samples a trace from the world's generative process: the first event is
// random, each next event follows the causal rule of the previous action
// (same object, random actor) with the rule's probability, else is random.
inline EventTrace sample_trace(const ScenarioSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> actor(0, static_cast<int>(spec.actors.size()) - 1);
  EventTrace trace;
  for (int t = 0; t < spec.n_frames; ++t) {
    Event e;
    if (t > 0 && spec.effect_of(trace.back().action) >= 0 &&
        u(rng) < spec.prob_of(trace.back().action)) {
      e.actor = actor(rng);
      e.action = spec.effect_of(trace.back().action);
      e.object = trace.back().object;
    } else {
      e = random_event(spec, rng);
    }
    e.t = t;
    trace.push_back(e);
  }
  return trace;
}

inline std::pair<FrameFeatureMatrix, EventTrace> synth_video(const ScenarioSpec& spec,
                                                             std::uint64_t seed) {
  if (spec.actors.empty() || spec.actions.empty() || spec.objects.empty() || spec.n_frames < 1)
    fail(Errc::EmptySpec, "scenario has no events to draw from");
  Rng rng(derive_seed(seed, 0x7ACE));
  auto trace = sample_trace(spec, rng);
  auto features = render_frames(spec, trace, seed, "synth-" + std::to_string(seed));
  return {std::move(features), std::move(trace)};
}

}  // namespace fvqa

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fvqa {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Every failure the library reports carries one of these codes so callers
// (and tests) can branch on the kind of failure rather than the message.
enum class Errc {
  EmptyCorpus,
  MaxSizeTooSmall,
  UnknownToken,
  UnknownId,
  TooLong,
  BadAnswerIndex,
  BadChoiceCount,
  BadHeader,
  NonFiniteValue,
  ShapeMismatch,
  DimMismatch,
  EmptySpec,
  BadConfig,
  SeqTooLong,
  GraphNotRecorded,
  WrongArrangement,
  EmptyMask,
  MissingVisualSlots,
  EmptyCandidates,
  BadSpec,
  UnknownTemplate,
  NothingBefore,
  NothingAfter,
  NotInTrace,
  EmptyRecords,
  NoVisualSlots,
  EmptyBatch,
  ConfigInvalid,
  DataMissing,
  CheckpointCorrupt,
  VersionMismatch,
  Corrupt,
  Io,
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::MaxSizeTooSmall: return "MaxSizeTooSmall";
    case Errc::UnknownToken: return "UnknownToken";
    case Errc::UnknownId: return "UnknownId";
    case Errc::TooLong: return "TooLong";
    case Errc::BadAnswerIndex: return "BadAnswerIndex";
    case Errc::BadChoiceCount: return "BadChoiceCount";
    case Errc::BadHeader: return "BadHeader";
    case Errc::NonFiniteValue: return "NonFiniteValue";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::EmptySpec: return "EmptySpec";
    case Errc::BadConfig: return "BadConfig";
    case Errc::SeqTooLong: return "SeqTooLong";
    case Errc::GraphNotRecorded: return "GraphNotRecorded";
    case Errc::WrongArrangement: return "WrongArrangement";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::MissingVisualSlots: return "MissingVisualSlots";
    case Errc::EmptyCandidates: return "EmptyCandidates";
    case Errc::BadSpec: return "BadSpec";
    case Errc::UnknownTemplate: return "UnknownTemplate";
    case Errc::NothingBefore: return "NothingBefore";
    case Errc::NothingAfter: return "NothingAfter";
    case Errc::NotInTrace: return "NotInTrace";
    case Errc::EmptyRecords: return "EmptyRecords";
    case Errc::NoVisualSlots: return "NoVisualSlots";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::DataMissing: return "DataMissing";
    case Errc::CheckpointCorrupt: return "CheckpointCorrupt";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::Corrupt: return "Corrupt";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

using Rng = std::mt19937_64;

// Mixes a base seed with a stream index so per-example / per-purpose
// generators are independent but reproducible (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Gaussian matrix drawn in double precision so that models instantiated at
// different scalar types from the same seed hold the same (rounded) values.
template <typename T>
Mat<T> gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<T>(dist(rng));
  return m;
}

// Row-wise numerically stable softmax, in place.
template <typename Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const auto mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& row) {
  const auto mx = row.maxCoeff();
  return mx + std::log((row.array() - mx).exp().sum());
}

}  // namespace fvqa

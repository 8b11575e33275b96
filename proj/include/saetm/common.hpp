#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace saetm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using SparseRows = Eigen::SparseMatrix<Scalar, Eigen::RowMajor, std::int64_t>;

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;

// Error codes double as the stable identifiers printed by the CLI.
enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  DomainError,
  NonFinite,
  Io,
  EmbMagic,
  EmbSize,
  VocabRange,
  Alignment,
  CorpusParse,
  ConfigParse,
  Checkpoint,
  EmptySupport,
  Judge,
  Stage,
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "E_INVALID_ARG";
    case ErrorCode::DimensionMismatch: return "E_DIM";
    case ErrorCode::DomainError: return "E_DOMAIN";
    case ErrorCode::NonFinite: return "E_NONFINITE";
    case ErrorCode::Io: return "E_IO";
    case ErrorCode::EmbMagic: return "E_EMB_MAGIC";
    case ErrorCode::EmbSize: return "E_EMB_SIZE";
    case ErrorCode::VocabRange: return "E_VOCAB_RANGE";
    case ErrorCode::Alignment: return "E_ALIGN";
    case ErrorCode::CorpusParse: return "E_CORPUS_PARSE";
    case ErrorCode::ConfigParse: return "E_CONFIG";
    case ErrorCode::Checkpoint: return "E_CHECKPOINT";
    case ErrorCode::EmptySupport: return "E_EMPTY_SUPPORT";
    case ErrorCode::Judge: return "E_JUDGE";
    case ErrorCode::Stage: return "E_STAGE";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace saetm

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dlnet {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  NonFinite,
  FullColumnRank,
  RankDeficientLift,
  NoInteriorBottleneck,
  FullRankA,
  GradientVanishes,
  ConstructionFailed,
  WrongClassification,
  InfeasibleConstruction,
  RankDeficientData,
  Io,
  Parse,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::FullColumnRank: return "FullColumnRank";
    case ErrorCode::RankDeficientLift: return "RankDeficientLift";
    case ErrorCode::NoInteriorBottleneck: return "NoInteriorBottleneck";
    case ErrorCode::FullRankA: return "FullRankA";
    case ErrorCode::GradientVanishes: return "GradientVanishes";
    case ErrorCode::ConstructionFailed: return "ConstructionFailed";
    case ErrorCode::WrongClassification: return "WrongClassification";
    case ErrorCode::InfeasibleConstruction: return "InfeasibleConstruction";
    case ErrorCode::RankDeficientData: return "RankDeficientData";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Parse: return "Parse";
  }
  return "Unknown";
}

/// Exception type for every failure raised by the library. The code is the
/// stable, machine-checkable part; the message carries diagnostics.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace dlnet

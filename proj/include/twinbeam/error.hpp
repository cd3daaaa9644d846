#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace twinbeam {

/// Failure categories raised across the library. Each public operation
/// documents which of these it can throw.
enum class Errc {
  InvalidDimensions,
  BadMagic,
  TruncatedPayload,
  UnknownDtype,
  IoFailure,
  RegionOutOfBounds,
  InvalidBin,
  InvalidParameter,
  DimensionMismatch,
  DegenerateInput,
  ZeroVariance,
  EmptyInput,
  NotPositiveSemidefinite,
  SingularNormalMatrix,
  NonConvergedFit,
  WrongMode,
  InsufficientGridCoverage,
  TooFewSuperpixels,
};

constexpr std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidDimensions: return "InvalidDimensions";
    case Errc::BadMagic: return "BadMagic";
    case Errc::TruncatedPayload: return "TruncatedPayload";
    case Errc::UnknownDtype: return "UnknownDtype";
    case Errc::IoFailure: return "IoFailure";
    case Errc::RegionOutOfBounds: return "RegionOutOfBounds";
    case Errc::InvalidBin: return "InvalidBin";
    case Errc::InvalidParameter: return "InvalidParameter";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::DegenerateInput: return "DegenerateInput";
    case Errc::ZeroVariance: return "ZeroVariance";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::NotPositiveSemidefinite: return "NotPositiveSemidefinite";
    case Errc::SingularNormalMatrix: return "SingularNormalMatrix";
    case Errc::NonConvergedFit: return "NonConvergedFit";
    case Errc::WrongMode: return "WrongMode";
    case Errc::InsufficientGridCoverage: return "InsufficientGridCoverage";
    case Errc::TooFewSuperpixels: return "TooFewSuperpixels";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace twinbeam

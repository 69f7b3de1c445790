#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace catscope {

enum class Errc {
  TruncationTooSmall,
  NonFinite,
  InvalidIndex,
  DimMismatch,
  NegativeProbability,
  StepFailure,
  ZeroAmplitude,
  QuadratureFailure,
  UnitOverflow,
  ZeroDetuning,
  PrepFailed,
  InvalidMode,
  LeakageSymbol,
  DegenerateDesign,
  NonConvergence,
  ZeroBaseline,
  SingleBin,
  ZeroEfficiency,
  ZeroP0,
  InvalidArgument,
  ConfigError,
  MissingCalibration,
  MissingArtifact,
  IoError,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::TruncationTooSmall: return "TruncationTooSmall";
    case Errc::NonFinite: return "NonFinite";
    case Errc::InvalidIndex: return "InvalidIndex";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::NegativeProbability: return "NegativeProbability";
    case Errc::StepFailure: return "StepFailure";
    case Errc::ZeroAmplitude: return "ZeroAmplitude";
    case Errc::QuadratureFailure: return "QuadratureFailure";
    case Errc::UnitOverflow: return "UnitOverflow";
    case Errc::ZeroDetuning: return "ZeroDetuning";
    case Errc::PrepFailed: return "PrepFailed";
    case Errc::InvalidMode: return "InvalidMode";
    case Errc::LeakageSymbol: return "LeakageSymbol";
    case Errc::DegenerateDesign: return "DegenerateDesign";
    case Errc::NonConvergence: return "NonConvergence";
    case Errc::ZeroBaseline: return "ZeroBaseline";
    case Errc::SingleBin: return "SingleBin";
    case Errc::ZeroEfficiency: return "ZeroEfficiency";
    case Errc::ZeroP0: return "ZeroP0";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::ConfigError: return "ConfigError";
    case Errc::MissingCalibration: return "MissingCalibration";
    case Errc::MissingArtifact: return "MissingArtifact";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool condition, Errc code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

using WarningSink = std::function<void(const std::string&)>;

inline WarningSink& warning_sink() {
  static WarningSink sink = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
  return sink;
}

/// Non-fatal diagnostics (perturbative regime exceeded, clipped estimates, ...).
inline void warn(const std::string& message) {
  if (warning_sink()) warning_sink()(message);
}

}  // namespace catscope

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace beamxray {

enum class ErrorKind {
  DegenerateMetric,
  TrappedGeodesic,
  TangentialExit,
  SelfIntersecting,
  ChartTooWide,
  InsufficientDerivatives,
  InvalidGauge,
  DomainError,
  StencilOutOfDomain,
  ShapeError,
  NotEnoughSamples,
  NotPositiveDefinite,
  RiccatiDegenerate,
  OrderCapExceeded,
  ChartInversionFailed,
  GridTooFine,
  AngleTooSmall,
  NotInH,
  NoAdmissibleDirections,
  IncompleteStructure,
  NotGaugeEquivalent,
  SignLiftFailed,
  ZeroMatrix,
  IllConditionedPrefactor,
  ConfigError,
};

inline const char* error_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::DegenerateMetric: return "DegenerateMetric";
    case ErrorKind::TrappedGeodesic: return "TrappedGeodesic";
    case ErrorKind::TangentialExit: return "TangentialExit";
    case ErrorKind::SelfIntersecting: return "SelfIntersecting";
    case ErrorKind::ChartTooWide: return "ChartTooWide";
    case ErrorKind::InsufficientDerivatives: return "InsufficientDerivatives";
    case ErrorKind::InvalidGauge: return "InvalidGauge";
    case ErrorKind::DomainError: return "DomainError";
    case ErrorKind::StencilOutOfDomain: return "StencilOutOfDomain";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::NotEnoughSamples: return "NotEnoughSamples";
    case ErrorKind::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorKind::RiccatiDegenerate: return "RiccatiDegenerate";
    case ErrorKind::OrderCapExceeded: return "OrderCapExceeded";
    case ErrorKind::ChartInversionFailed: return "ChartInversionFailed";
    case ErrorKind::GridTooFine: return "GridTooFine";
    case ErrorKind::AngleTooSmall: return "AngleTooSmall";
    case ErrorKind::NotInH: return "NotInH";
    case ErrorKind::NoAdmissibleDirections: return "NoAdmissibleDirections";
    case ErrorKind::IncompleteStructure: return "IncompleteStructure";
    case ErrorKind::NotGaugeEquivalent: return "NotGaugeEquivalent";
    case ErrorKind::SignLiftFailed: return "SignLiftFailed";
    case ErrorKind::ZeroMatrix: return "ZeroMatrix";
    case ErrorKind::IllConditionedPrefactor: return "IllConditionedPrefactor";
    case ErrorKind::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(error_name(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Raised by the gauge reconstruction when two fibre directions disagree.
// The witness is the point and direction pair where the broken transforms
// of the two connections differ the most.
class NotGaugeEquivalentError : public Error {
 public:
  NotGaugeEquivalentError(const std::string& what, std::vector<double> x, std::vector<double> v,
                          std::vector<double> w, double defect)
      : Error(ErrorKind::NotGaugeEquivalent, what),
        x(std::move(x)),
        v(std::move(v)),
        w(std::move(w)),
        defect(defect) {}
  std::vector<double> x, v, w;
  double defect;
};

}  // namespace beamxray

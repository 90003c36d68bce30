#pragma once

#include <stdexcept>
#include <string>

namespace ddpf {

enum class ErrorKind {
    CycleDetected,
    Disconnected,
    EdgeOrderViolation,
    UnknownNode,
    InvalidParameter,
    NonpositiveVoltage,
    DimensionMismatch,
    NoConvergence,
    AngleOutOfTrustRegion,
    OrderTooLarge,
    InconsistentQuery,
    ExcitationFailed,
    IoError,
    SchemaError,
    NumericalBreakdown,
    TooManyBinaries,
    Infeasible,
    ModelNotPE,
    ProjectionInfeasible,
    ForecastTooShort,
    StateBoundViolation,
    InfeasibleProfile,
};

inline const char* to_string(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::CycleDetected: return "CycleDetected";
    case ErrorKind::Disconnected: return "Disconnected";
    case ErrorKind::EdgeOrderViolation: return "EdgeOrderViolation";
    case ErrorKind::UnknownNode: return "UnknownNode";
    case ErrorKind::InvalidParameter: return "InvalidParameter";
    case ErrorKind::NonpositiveVoltage: return "NonpositiveVoltage";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::AngleOutOfTrustRegion: return "AngleOutOfTrustRegion";
    case ErrorKind::OrderTooLarge: return "OrderTooLarge";
    case ErrorKind::InconsistentQuery: return "InconsistentQuery";
    case ErrorKind::ExcitationFailed: return "ExcitationFailed";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::SchemaError: return "SchemaError";
    case ErrorKind::NumericalBreakdown: return "NumericalBreakdown";
    case ErrorKind::TooManyBinaries: return "TooManyBinaries";
    case ErrorKind::Infeasible: return "Infeasible";
    case ErrorKind::ModelNotPE: return "ModelNotPE";
    case ErrorKind::ProjectionInfeasible: return "ProjectionInfeasible";
    case ErrorKind::ForecastTooShort: return "ForecastTooShort";
    case ErrorKind::StateBoundViolation: return "StateBoundViolation";
    case ErrorKind::InfeasibleProfile: return "InfeasibleProfile";
    }
    return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind)
    {
    }

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace ddpf

#include "xmae/error.hpp"

namespace xmae {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidCutoff: return "InvalidCutoff";
    case ErrorKind::InvalidOrder: return "InvalidOrder";
    case ErrorKind::DegenerateSignal: return "DegenerateSignal";
    case ErrorKind::InvalidRatio: return "InvalidRatio";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::IndivisibleLength: return "IndivisibleLength";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::TooFewBeats: return "TooFewBeats";
    case ErrorKind::NoPairs: return "NoPairs";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::SingleClassFold: return "SingleClassFold";
    case ErrorKind::TemplateTooShort: return "TemplateTooShort";
    case ErrorKind::TooLarge: return "TooLarge";
    case ErrorKind::ConstructionViolation: return "ConstructionViolation";
    case ErrorKind::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case ErrorKind::Format: return "Format";
    case ErrorKind::Io: return "Io";
    case ErrorKind::Config: return "Config";
  }
  return "Unknown";
}

}  // namespace xmae

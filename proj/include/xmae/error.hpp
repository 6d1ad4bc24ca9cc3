#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xmae {

// Every failure the library reports carries one of these kinds so callers
// (the CLI in particular) can map them onto stable exit codes.
enum class ErrorKind {
  InvalidCutoff,
  InvalidOrder,
  DegenerateSignal,
  InvalidRatio,
  NonFiniteLoss,
  NonFiniteGradient,
  IndivisibleLength,
  ShapeMismatch,
  EmptyMask,
  TooFewBeats,
  NoPairs,
  SingularSystem,
  SingleClassFold,
  TemplateTooShort,
  TooLarge,
  ConstructionViolation,
  IncompatibleCheckpoint,
  Format,
  Io,
  Config,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace xmae

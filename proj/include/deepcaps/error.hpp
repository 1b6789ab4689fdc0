#pragma once

#include <stdexcept>
#include <string>

namespace deepcaps {

// Every error thrown by the library carries a short machine-readable class
// name (e.g. "ShapeError") that the CLI prints before the message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define DEEPCAPS_DEFINE_ERROR(Name)                                       \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  };

DEEPCAPS_DEFINE_ERROR(ShapeError)
DEEPCAPS_DEFINE_ERROR(ValueError)
DEEPCAPS_DEFINE_ERROR(GradientError)
DEEPCAPS_DEFINE_ERROR(ConfigError)
DEEPCAPS_DEFINE_ERROR(IoError)
DEEPCAPS_DEFINE_ERROR(FormatError)
DEEPCAPS_DEFINE_ERROR(TruncatedError)
DEEPCAPS_DEFINE_ERROR(CountMismatchError)
DEEPCAPS_DEFINE_ERROR(CheckpointHeaderError)
DEEPCAPS_DEFINE_ERROR(CheckpointVersionError)
DEEPCAPS_DEFINE_ERROR(CheckpointTruncatedError)
DEEPCAPS_DEFINE_ERROR(ArchitectureMismatchError)
DEEPCAPS_DEFINE_ERROR(NonFiniteLossError)

#undef DEEPCAPS_DEFINE_ERROR

}  // namespace deepcaps

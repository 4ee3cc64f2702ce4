#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace palm {

enum class ErrorKind {
  RejectedSample,
  Io,
  CorruptInput,
  Configuration,
  EmptyInput,
  InsufficientData,
  EmptyBand,
  Comparison,
  Ordering,
  Size,
  Validation,
  Authentication,
  Authorization,
  NotFound,
  Conflict,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace palm

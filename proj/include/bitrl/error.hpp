#pragma once

#include <stdexcept>
#include <string>

namespace bitrl {

enum class ErrorKind {
  dimension_mismatch,
  degenerate_input,
  format,
  invalid_argument,
  environment,
  diverged,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension_mismatch: return "dimension mismatch";
    case ErrorKind::degenerate_input: return "degenerate input";
    case ErrorKind::format: return "format error";
    case ErrorKind::invalid_argument: return "invalid argument";
    case ErrorKind::environment: return "environment error";
    case ErrorKind::diverged: return "diverged";
    case ErrorKind::io: return "i/o error";
  }
  return "error";
}

// Every failure the library reports carries a kind so callers (the CLI in
// particular) can map it onto exit codes without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace bitrl

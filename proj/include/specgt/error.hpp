#pragma once

#include <stdexcept>
#include <string>

namespace specgt {

/// Failure category. Each category maps onto one process exit code.
enum class ErrorKind { usage, data, numerical, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised when the spectral-angle objective is evaluated where ||E f|| vanishes.
class SingularPointError : public Error {
 public:
  explicit SingularPointError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

inline Error usage_error(const std::string& what) { return Error(ErrorKind::usage, what); }
inline Error data_error(const std::string& what) { return Error(ErrorKind::data, what); }
inline Error numerical_error(const std::string& what) { return Error(ErrorKind::numerical, what); }
inline Error io_error(const std::string& what) { return Error(ErrorKind::io, what); }

/// 0 success, 2 usage, 3 data validation (and I/O), 4 numerical failure.
constexpr int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::io: return 3;
    case ErrorKind::numerical: return 4;
  }
  return 1;
}

}  // namespace specgt

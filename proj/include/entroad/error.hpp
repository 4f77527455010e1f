#pragma once

#include <stdexcept>
#include <string>

namespace entroad {

// Categories double as CLI exit codes.
enum class ErrorKind : int { usage = 1, data = 2, numerical = 3 };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

// Bad parameters or configuration.
class UsageError : public Error {
public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

// Malformed files, invariant violations in data, missing labels.
class DataError : public Error {
public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

// Non-finite values, failed gradient checks.
class NumericalError : public Error {
public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

} // namespace entroad

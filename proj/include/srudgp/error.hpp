#pragma once

#include <stdexcept>
#include <string>

namespace srudgp {

// Every failure the library reports derives from Error so callers can catch
// one type; the CLI maps kind() to a single diagnostic line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error("input", what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("domain", what) {}
};

class SingularityError : public Error {
 public:
  SingularityError(const std::string& what, double largest_jitter)
      : Error("singularity", what), largest_jitter_(largest_jitter) {}
  double largest_jitter() const noexcept { return largest_jitter_; }

 private:
  double largest_jitter_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error("numerical", what) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line)
      : Error("parse", what + " (line " + std::to_string(line) + ")"), line_(line) {}
  long line() const noexcept { return line_; }

 private:
  long line_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

}  // namespace srudgp

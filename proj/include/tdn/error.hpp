#pragma once

#include <stdexcept>
#include <string>

namespace tdn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// DSL syntax or structural error. Line and column are 1-based; column 0
/// means the whole line.
class ParseError : public Error {
 public:
  ParseError(int line, int column, const std::string& what)
      : Error("line " + std::to_string(line) + ":" + std::to_string(column) + ": " + what),
        line_(line),
        column_(column) {}
  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value or a domain violation in a numeric routine.
class NumericError : public Error {
 public:
  NumericError(std::string op_id, const std::string& what)
      : Error(op_id.empty() ? what : op_id + ": " + what), op_id_(std::move(op_id)) {}
  const std::string& op_id() const { return op_id_; }

 private:
  std::string op_id_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(int line, const std::string& what)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

}  // namespace tdn

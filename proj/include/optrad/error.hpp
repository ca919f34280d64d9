#ifndef OPTRAD_ERROR_HPP_
#define OPTRAD_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace optrad {

/// Bad input: malformed files, violated preconditions, invalid configs.
/// Surfaces as exit code 1 from the command line.
class ValidationError : public std::invalid_argument {
 public:
  ValidationError(const std::string& module, const std::string& what)
      : std::invalid_argument(module + ": " + what) {}
};

/// Failures during a numerically valid request (non-convergence, I/O).
/// Surfaces as exit code 2.
class RuntimeError : public std::runtime_error {
 public:
  RuntimeError(const std::string& module, const std::string& what)
      : std::runtime_error(module + ": " + what) {}
};

class ParseError : public ValidationError {
 public:
  ParseError(std::size_t frame, std::size_t line, const std::string& what)
      : ValidationError("structures", "frame " + std::to_string(frame) +
                                          ", line " + std::to_string(line) +
                                          ": " + what),
        frame_{frame},
        line_{line} {}
  std::size_t frame() const { return frame_; }
  std::size_t line() const { return line_; }

 private:
  std::size_t frame_;
  std::size_t line_;
};

}  // namespace optrad

#endif  // OPTRAD_ERROR_HPP_

#pragma once

#include <stdexcept>
#include <string>

namespace bsr {

// Input that violates a documented schema or precondition.
class MalformedInput : public std::invalid_argument {
 public:
  explicit MalformedInput(const std::string& what) : std::invalid_argument(what) {}
};

// A numerical procedure failed (instability, non-convergence, bad horizon).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// A statistical procedure did not have enough data to decide.
class Inconclusive : public std::runtime_error {
 public:
  explicit Inconclusive(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace bsr

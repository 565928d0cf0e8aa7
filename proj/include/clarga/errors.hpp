#pragma once

#include <stdexcept>
#include <string>

namespace clarga {

// Shape or dimension disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Violated operation precondition (non-scalar loss, B < 2, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Softmax row with no eligible entry.
class DegenerateSoftmaxError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Non-finite values or a zero-norm vector where a direction is required.
class NumericalError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed data: wrong labels, all-missing samples, bad dataset files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace clarga

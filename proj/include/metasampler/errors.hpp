#pragma once

#include <stdexcept>
#include <string>

namespace msamp {

// Precondition/contract failures (bad shapes, invalid arguments, protocol
// misuse). These indicate programmer error, not runtime conditions.
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

class IndexError : public ContractViolation {
 public:
  explicit IndexError(const std::string& what) : ContractViolation(what) {}
};

class DegenerateInput : public std::runtime_error {
 public:
  explicit DegenerateInput(const std::string& what) : std::runtime_error(what) {}
};

// NaN/Inf detected during training; carries diagnostics for the abort report.
class NumericAbort : public std::runtime_error {
 public:
  explicit NumericAbort(const std::string& what) : std::runtime_error(what) {}
};

// A train-pool model leaked into an evaluation or adaptation pool.
class PoolOverlap : public std::logic_error {
 public:
  explicit PoolOverlap(const std::string& what) : std::logic_error(what) {}
};

// A task model failed to reach its convergence bar within the epoch budget.
class PretrainFailure : public std::runtime_error {
 public:
  explicit PretrainFailure(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace msamp

#pragma once

#include <stdexcept>
#include <string>

namespace jmcox {

// Bad input data or configuration (CLI exit code 2).
class validation_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Iterative procedure failed to reach its certificate (CLI exit code 3).
class convergence_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File / stream failures (CLI exit code 4).
class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Risk set with zero weight at an event time.
class degenerate_risk_set_error : public std::runtime_error {
 public:
  degenerate_risk_set_error(double time)
      : std::runtime_error("degenerate risk set at event time " + std::to_string(time)),
        event_time(time) {}
  double event_time;
};

class singular_operator_error : public std::runtime_error {
 public:
  singular_operator_error(const std::string& what, double cond)
      : std::runtime_error(what), condition_number(cond) {}
  double condition_number;
};

}  // namespace jmcox

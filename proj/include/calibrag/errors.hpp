#pragma once

#include <stdexcept>
#include <string>

namespace calibrag {

// Caller broke a documented precondition (dimension mismatch, empty batch, ...).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed input file or record.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Metric has no defined value for the given input (e.g. AUROC on one class).
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Network or server-side failure. `status` is the HTTP status, or 0 when the
// request never produced a response.
class TransportError : public std::runtime_error {
 public:
  TransportError(const std::string& what, int status, bool retryable = true)
      : std::runtime_error(what), status_(status), retryable_(retryable) {}
  int status() const noexcept { return status_; }
  bool retryable() const noexcept { return retryable_; }

 private:
  int status_;
  bool retryable_;
};

// Endpoint rejected the request as malformed or unauthorized (HTTP 4xx).
class ConfigurationError : public std::runtime_error {
 public:
  ConfigurationError(const std::string& what, int status = 0)
      : std::runtime_error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

// Response arrived but does not have the expected shape.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GradingParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, long step)
      : std::runtime_error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace calibrag

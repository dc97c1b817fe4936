#pragma once

#include <stdexcept>
#include <string>

namespace lethe {

// Shape or domain violation in a call argument.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Rejected training / experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed on-disk input. `field()` names the offending part ("images", "labels", ...).
class FormatError : public std::runtime_error {
 public:
  FormatError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Client updates that cannot be aggregated together.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProbeDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lethe

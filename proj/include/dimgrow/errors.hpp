#pragma once

#include <stdexcept>
#include <string>

namespace dimgrow {

// Exception hierarchy. The CLI maps these onto exit codes:
// ConfigError / DataError / IoError -> 2, NumericError -> 3.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Metric is undefined for the given input (e.g. AUC with a single class).
struct MetricError : std::runtime_error {
  explicit MetricError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dimgrow

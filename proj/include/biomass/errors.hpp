#pragma once

#include <stdexcept>
#include <string>

namespace biomass {

// Error hierarchy. Every failure mode the library reports maps onto one of
// these; callers that want a single catch point use BiomassError.
struct BiomassError : std::runtime_error {
  explicit BiomassError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : BiomassError {
  explicit ShapeError(const std::string& msg) : BiomassError("shape error: " + msg) {}
};

struct ConfigError : BiomassError {
  explicit ConfigError(const std::string& msg) : BiomassError("config error: " + msg) {}
};

struct NumericError : BiomassError {
  explicit NumericError(const std::string& msg) : BiomassError("numeric error: " + msg) {}
};

struct DataError : BiomassError {
  explicit DataError(const std::string& msg) : BiomassError("data error: " + msg) {}
};

struct VocabularyError : BiomassError {
  explicit VocabularyError(const std::string& msg) : BiomassError("vocabulary error: " + msg) {}
};

struct ScheduleError : BiomassError {
  explicit ScheduleError(const std::string& msg) : BiomassError("schedule error: " + msg) {}
};

struct MetricError : BiomassError {
  explicit MetricError(const std::string& msg) : BiomassError("metric error: " + msg) {}
};

struct IoError : BiomassError {
  explicit IoError(const std::string& msg) : BiomassError("io error: " + msg) {}
};

}  // namespace biomass

#pragma once

#include <stdexcept>
#include <string>

namespace frboost {

// Exit-code contract of the CLI: 2 config, 3 prerequisite, 4 numerical.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PrerequisiteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IngestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ScoringError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace frboost

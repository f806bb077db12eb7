#pragma once

#include <stdexcept>

namespace sapo {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// exit codes: ConfigError/ValidationError/ContractError -> 2,
// DataFormatError -> 3, NumericError -> 4.

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid content in otherwise well-formed inputs (bad token ids, empty
// responses, ...).
struct ValidationError : ConfigError {
  using ConfigError::ConfigError;
};

// Unparseable files: malformed JSONL lines, corrupt checkpoints.
struct DataFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inputs outside a function's mathematical domain.
struct DomainError : NumericError {
  using NumericError::NumericError;
};

// API misuse: violated preconditions that indicate a caller bug.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ShapeError : ContractError {
  using ContractError::ContractError;
};

}  // namespace sapo

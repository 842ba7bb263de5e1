// Exception taxonomy shared across modules; the CLI maps these to exit codes.
#pragma once

#include <stdexcept>
#include <string>

namespace tham {

// Configuration schema or value problems (exit code 3).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corpus / artifact I-O problems (exit code 4).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed record while parsing a dataset; message names the record.
struct ParseError : DataError {
  explicit ParseError(const std::string& msg) : DataError(msg) {}
};

// Structurally valid file whose cross-references do not resolve.
struct IntegrityError : DataError {
  explicit IntegrityError(const std::string& msg) : DataError(msg) {}
};

// Non-finite loss or similar mid-training failure (exit code 5).
struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tham

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace spotdiff {

/// Failure classes surfaced to callers. The CLI maps these onto exit codes.
enum class ErrorCategory {
  kConfig,        // bad configuration, shape or dimension contract broken by setup
  kInput,         // bad runtime input (non-finite values, out-of-range index, ...)
  kPersistence,   // missing file, unreadable path
  kCorruptCorpus, // corpus files present but failing validation
  kVersioning,    // schema version mismatch
  kIntegrity,     // checksum mismatch on a checkpoint payload
  kNumerical,     // non-finite loss during training
  kRuntime,
};

std::string_view category_name(ErrorCategory c);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::kConfig, what) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorCategory::kInput, what) {}
};

class PersistenceError : public Error {
 public:
  explicit PersistenceError(const std::string& what) : Error(ErrorCategory::kPersistence, what) {}
};

class CorruptCorpusError : public Error {
 public:
  explicit CorruptCorpusError(const std::string& what)
      : Error(ErrorCategory::kCorruptCorpus, what) {}
};

class VersioningError : public Error {
 public:
  explicit VersioningError(const std::string& what) : Error(ErrorCategory::kVersioning, what) {}
};

class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& what) : Error(ErrorCategory::kIntegrity, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorCategory::kNumerical, what) {}
};

}  // namespace spotdiff

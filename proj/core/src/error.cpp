#include "spotdiff/error.hpp"

namespace spotdiff {

std::string_view category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kInput: return "input";
    case ErrorCategory::kPersistence: return "persistence";
    case ErrorCategory::kCorruptCorpus: return "corrupt_corpus";
    case ErrorCategory::kVersioning: return "versioning";
    case ErrorCategory::kIntegrity: return "integrity";
    case ErrorCategory::kNumerical: return "numerical";
    case ErrorCategory::kRuntime: return "runtime";
  }
  return "runtime";
}

}  // namespace spotdiff

#pragma once

#include <stdexcept>
#include <string>

namespace didi {

/// Error categories. The CLI maps each category to a distinct exit code.
enum class ErrorKind {
  contract,             // precondition violated by the caller
  config,               // invalid or inconsistent configuration
  divergence,           // non-finite loss or gradient during training
  guided_sampling,      // non-finite guidance gradient
  empty_dataset,
  io,                   // generic file-system failure
  version_mismatch,
  truncated_file,
  checksum_failure,
  architecture_mismatch,
  missing_artifact,
  digest_mismatch,
  undefined_score,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::contract: return "contract violation";
    case ErrorKind::config: return "configuration error";
    case ErrorKind::divergence: return "training divergence";
    case ErrorKind::guided_sampling: return "guided sampling error";
    case ErrorKind::empty_dataset: return "empty dataset";
    case ErrorKind::io: return "i/o error";
    case ErrorKind::version_mismatch: return "format version mismatch";
    case ErrorKind::truncated_file: return "truncated file";
    case ErrorKind::checksum_failure: return "checksum failure";
    case ErrorKind::architecture_mismatch: return "architecture mismatch";
    case ErrorKind::missing_artifact: return "missing artifact";
    case ErrorKind::digest_mismatch: return "digest mismatch";
    case ErrorKind::undefined_score: return "undefined score";
  }
  return "unknown error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised when training produces a non-finite value; carries the step index.
class TrainingError : public Error {
 public:
  TrainingError(long step, const std::string& what)
      : Error(ErrorKind::divergence, "step " + std::to_string(step) + ": " + what), step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

class GuidedSamplingError : public Error {
 public:
  GuidedSamplingError(int diffusion_step, const std::string& what)
      : Error(ErrorKind::guided_sampling,
              "diffusion step " + std::to_string(diffusion_step) + ": " + what),
        diffusion_step_(diffusion_step) {}

  int diffusion_step() const noexcept { return diffusion_step_; }

 private:
  int diffusion_step_;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorKind::contract, what);
}

inline void require_config(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorKind::config, what);
}

}  // namespace didi

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lowrank {

/// Raised when a caller breaks a documented precondition (shape mismatch,
/// out-of-range rank, bad label, ...). The CLI maps it to exit code 1.
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when training produces a non-finite loss.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int epoch, const std::string& what)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

enum class IoErrorKind {
  kOpenFailed,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kTrailingBytes,
  kCrcMismatch,
  kPixelOutOfRange,
  kLabelOutOfRange,
  kBadField,
  kWriteFailed,
};

const char* to_string(IoErrorKind kind) noexcept;

/// File-format and filesystem failures. Carries the byte offset at which the
/// problem was detected (0 when not applicable). The CLI maps it to exit 2.
class IoError : public std::runtime_error {
 public:
  IoError(IoErrorKind kind, std::uint64_t offset, const std::string& detail);

  IoErrorKind kind() const noexcept { return kind_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  IoErrorKind kind_;
  std::uint64_t offset_;
};

#define LOWRANK_REQUIRE(cond, msg)                  \
  do {                                              \
    if (!(cond)) throw ::lowrank::ContractViolation(msg); \
  } while (0)

}  // namespace lowrank

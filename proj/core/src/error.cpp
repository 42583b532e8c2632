#include "lowrank/error.hpp"

#include <string>

namespace lowrank {

const char* to_string(IoErrorKind kind) noexcept {
  switch (kind) {
    case IoErrorKind::kOpenFailed: return "open_failed";
    case IoErrorKind::kBadMagic: return "bad_magic";
    case IoErrorKind::kBadVersion: return "bad_version";
    case IoErrorKind::kTruncated: return "truncated";
    case IoErrorKind::kTrailingBytes: return "trailing_bytes";
    case IoErrorKind::kCrcMismatch: return "crc_mismatch";
    case IoErrorKind::kPixelOutOfRange: return "pixel_out_of_range";
    case IoErrorKind::kLabelOutOfRange: return "label_out_of_range";
    case IoErrorKind::kBadField: return "bad_field";
    case IoErrorKind::kWriteFailed: return "write_failed";
  }
  return "unknown";
}

IoError::IoError(IoErrorKind kind, std::uint64_t offset, const std::string& detail)
    : std::runtime_error(std::string(to_string(kind)) + " at byte " + std::to_string(offset) +
                         ": " + detail),
      kind_(kind),
      offset_(offset) {}

}  // namespace lowrank

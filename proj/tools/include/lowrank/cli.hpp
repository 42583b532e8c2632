#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lowrank::cli {

/// Runs one `lowrank` invocation. args excludes the program name.
/// Returns 0 on success, 1 on a usage error or contract violation, 2 on an
/// I/O error.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Version string baked in at configure time (git describe when available).
const char* version() noexcept;

}  // namespace lowrank::cli

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace wnet::cli {

inline constexpr const char* kToolkitVersion = "0.1.0";

/// Runs one command line (`args[0]` is the program name). Returns 0 on
/// success, 1 on a usage error and 2 on a runtime failure. A run manifest
/// is written in every case once the work directory is known.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace wnet::cli

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nvs::cli {

enum ExitCode { kSuccess = 0, kUsageError = 1, kRuntimeError = 2 };

/// Environment variable naming the default output root.
constexpr const char* kOutputRootEnv = "NVS_OUTPUT_ROOT";

/// Runs one command line (without the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nvs::cli

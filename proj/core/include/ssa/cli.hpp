#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ssa/config.hpp"

namespace ssa {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;  // selftest property failed
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;
inline constexpr int kExitDivergence = 4;

// defaults < --config file < command-line flags. Throws ConfigError.
RunConfig parse_args(const std::vector<std::string>& args);

// Runs a validated config; returns the process exit code.
int dispatch(const RunConfig& cfg, std::ostream& out, std::ostream& err);

// parse_args + dispatch with error categories mapped to exit codes.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ssa

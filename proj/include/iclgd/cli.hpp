#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace iclgd {

// Exit codes of the command-line runner.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailure = 1;
inline constexpr int kExitUsage = 2;

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace iclgd

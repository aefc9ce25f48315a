#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tdn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitConstraint = 2;
inline constexpr int kExitNumeric = 3;

/// Runs one subcommand. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tdn::cli

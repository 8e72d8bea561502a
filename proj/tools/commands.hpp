#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace smoothfit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitNumeric = 1;
inline constexpr int kExitInput = 2;

// Entry point shared by the executable and the tests. args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace smoothfit::cli

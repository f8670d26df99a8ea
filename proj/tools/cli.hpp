#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace featft::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitIo = 2;

/// Entry point of the `featft` tool. `args` excludes the program name. Errors are reported as
/// one line on `err`: `featft: error kind=<config|io|training> message="..."`.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace featft::cli

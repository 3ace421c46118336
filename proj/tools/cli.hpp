#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pkb::cli {

// Exit status for command-line usage errors; module failures use
// pkb::exit_code(ErrorKind).
inline constexpr int kUsageError = 1;

// Runs one command line (args excludes the program name) and returns the
// process exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pkb::cli

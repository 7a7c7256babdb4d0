#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace calibrag::cli {

/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run(int argc, char** argv);
/// Same as above with explicit arguments (without the program name) and streams.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace calibrag::cli

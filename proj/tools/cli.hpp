#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace decouple::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,
    kConfig = 3,
    kData = 4,
    kIo = 5,
};

/// Runs one subcommand. `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace decouple::cli

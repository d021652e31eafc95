#pragma once

#include <iosfwd>

namespace hair {

/// Exit statuses of the `hair` command.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,        // property suite failure or runtime error
  kExitInvalidConfig = 2,  // bad config, arguments or degradation spec
  kExitMissingFile = 3,    // unreadable, unwritable or corrupt file
};

/// Entry point of `hair train|restore|eval|giv|check`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hair

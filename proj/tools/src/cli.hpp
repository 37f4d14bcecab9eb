#pragma once

#include <ostream>

namespace aotp::cli {

// Parses argv and runs one subcommand. Results go to `out`; progress and
// diagnostics go to `err`. Every failure writes one JSON object
// {"code": ..., "message": ...} to `err`. Returns 0 on success, 1 on a runtime
// failure and 2 on a usage error (after printing the usage text).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace aotp::cli

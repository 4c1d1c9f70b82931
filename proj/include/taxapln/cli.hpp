#pragma once

#include <ostream>

namespace taxapln {

/// Runs one `taxapln <subcommand>` invocation and returns the process exit
/// code: 0 success, 2 config error, 3 data error, 4 numeric failure.
/// Errors are reported on `err` as one JSON object.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace taxapln

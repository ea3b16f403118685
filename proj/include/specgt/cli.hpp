#pragma once

#include <iosfwd>

namespace specgt::cli {

/// Parses and runs one `specgt` command line. Returns the process exit code:
/// 0 success, 2 usage, 3 data validation or I/O, 4 numerical failure. Failures
/// print a single-line diagnostic to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace specgt::cli

#pragma once

#include <ostream>

namespace rebasin {

// Process exit codes of the rebasin tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitError = 1,         // I/O, format, usage or invalid value
  kExitArchMismatch = 2,  // inputs describe different architectures
  kExitNotConverged = 3,  // match hit --max-sweeps; the assignment is still written
  kExitVerifyFailed = 4,  // verify found a deviation above --tol
};

// Entry point shared by the executable and the tests. argv[0] is the program
// name. Normal output goes to `out`, diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rebasin

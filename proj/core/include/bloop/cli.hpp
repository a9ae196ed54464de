#ifndef BLOOP_CLI_HPP
#define BLOOP_CLI_HPP

#include <ostream>
#include <string>
#include <vector>

namespace bloop {

// Full command-line front end, callable in-process: `args` is everything
// after the program name, diagnostics go to `diag`, result files go to the
// --out directory. Returns the process exit code: 0 success, 2 config or
// usage error, 3 numerical abort during a run, 4 I/O failure.
int run_cli(const std::vector<std::string>& args, std::ostream& diag);

}  // namespace bloop

#endif  // BLOOP_CLI_HPP

#pragma once

#include <string>
#include <vector>

namespace exitlab {

// Subcommands: run, compare, sched-train, sched-eval, oracle. Returns the
// process exit code; diagnostics go to stderr. The vector overload exists so
// tests can drive the CLI in-process.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // args exclude the program name

}  // namespace exitlab

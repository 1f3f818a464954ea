#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace aquakv {

inline constexpr int kReportSchemaVersion = 1;

// Exit codes of the command-line tool.
enum ExitCode : int {
    kExitOk = 0,
    kExitOther = 1,
    kExitUsage = 2,
    kExitConfig = 3,
    kExitIo = 4,
    kExitFormat = 5,
    kExitIncompatible = 6,
    kExitSingular = 7,
};

// Entry point of the `aquakv` tool; reports go to `out`, a one-line JSON
// error to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aquakv

#pragma once

#include <iosfwd>

namespace pld {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDivergence = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the `pld` tool, callable in-process. Usage text and
// diagnostics go to `err`, progress and summaries to `out`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pld

#pragma once

#include <iosfwd>

namespace illusign::cli {

/// Entry point of the `illusign` tool. Returns the process exit code: 0 on success,
/// 2 for invalid arguments or configuration, 3 when an external model fails, 4 otherwise.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace illusign::cli

#pragma once

#include <iosfwd>

namespace eft {

/// Command-line entry point. Returns 0 on success, 1 on usage or input
/// errors, 2 on internal errors.
int cli_main(int argc, const char* const* argv);
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace eft

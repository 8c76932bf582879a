#pragma once

namespace apex {

// Entry point for the apex command-line tool. Returns the process exit code.
int cli_dispatch(int argc, const char* const* argv);

}  // namespace apex

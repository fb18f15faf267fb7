#pragma once

namespace ktraj::cli {

// Entry point shared by the ktraj executable and the tests.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.
int run(int argc, const char* const* argv);

}  // namespace ktraj::cli

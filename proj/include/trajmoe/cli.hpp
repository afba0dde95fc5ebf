#pragma once

#include <string>
#include <vector>

namespace trajmoe {

constexpr const char* kToolVersion = "trajmoe 0.1.0";

// Entry point behind the binary; takes the arguments after the program
// name. Returns 0 on success, 1 on runtime failure, 2 on usage errors.
int run_cli(const std::vector<std::string>& args);

}  // namespace trajmoe

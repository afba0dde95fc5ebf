#include <vector>

#include "trajmoe/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return trajmoe::run_cli(args);
}

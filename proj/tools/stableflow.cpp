#include <string>
#include <vector>

#include "stableflow/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return stableflow::cli::run(args);
}

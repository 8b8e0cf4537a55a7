#include <string>
#include <vector>

#include "metfa/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return metfa::run_cli(std::move(args));
}

#include <iostream>
#include <string>
#include <vector>

#include "aquakv/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return aquakv::run_cli(args, std::cout, std::cerr);
}

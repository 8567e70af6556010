#include <iostream>

#include "kcd/cli.hpp"

int main(int argc, char** argv) {
    return kcd::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

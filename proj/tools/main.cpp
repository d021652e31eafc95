#include "hair/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return hair::run_cli(argc, argv, std::cout, std::cerr); }

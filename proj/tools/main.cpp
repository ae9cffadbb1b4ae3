#include <iostream>

#include "diff/cli.hpp"

int main(int argc, char** argv) { return diff::run_cli(argc, argv, std::cout, std::cerr); }

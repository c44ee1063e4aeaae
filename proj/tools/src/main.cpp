#include <iostream>

#include "pld/cli.hpp"

int main(int argc, char** argv) { return pld::run_cli(argc, argv, std::cout, std::cerr); }

#include <iostream>

#include "taxapln/cli.hpp"

int main(int argc, char** argv) { return taxapln::run_cli(argc, argv, std::cout, std::cerr); }

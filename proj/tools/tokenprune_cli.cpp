#include "tokenprune/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return tokenprune::cli::run(argc, argv, std::cout, std::cerr); }

#include <iostream>

#include "sopool/cli.hpp"

int main(int argc, char** argv) { return sopool::cli::run(argc, argv, std::cout, std::cerr); }

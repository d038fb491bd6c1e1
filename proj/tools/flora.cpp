#include <iostream>

#include "flora/cli.hpp"

int main(int argc, char** argv) { return flora::cli::run(argc, argv, std::cout, std::cerr); }

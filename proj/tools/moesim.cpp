#include <iostream>

#include "moesim/cli.hpp"

int main(int argc, char** argv) { return moesim::run_cli({argv + 1, argv + argc}, std::cout, std::cerr); }

#include "trajdistill/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return trajdistill::run_cli(argc, argv, std::cout, std::cerr); }

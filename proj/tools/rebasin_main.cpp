#include <iostream>

#include "rebasin/cli.hpp"

int main(int argc, char** argv) { return rebasin::run_cli(argc, argv, std::cout, std::cerr); }

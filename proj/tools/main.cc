#include <iostream>

#include "cli.h"

int main(int argc, char** argv) { return mrnn::cli::run({argv, argv + argc}, std::cout, std::cerr); }

#include <iostream>

#include "vig3d/cli.hpp"

int main(int argc, char** argv) {
  return vig3d::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

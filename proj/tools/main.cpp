#include <iostream>

#include "commands.hpp"

int main(int argc, char** argv) {
  return smoothfit::cli::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

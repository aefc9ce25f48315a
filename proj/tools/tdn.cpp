#include <iostream>
#include <string>
#include <vector>

#include "tdn/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return tdn::cli::run(args, std::cout, std::cerr);
}

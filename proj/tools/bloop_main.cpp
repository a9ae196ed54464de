#include <iostream>
#include <string>
#include <vector>

#include "bloop/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return bloop::run_cli(args, std::cerr);
}

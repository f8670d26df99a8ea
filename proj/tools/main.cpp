#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  return featft::cli::cli_main({argv + 1, argv + argc}, std::cout, std::cerr);
}

#include "medfuse/cli.hpp"

int main(int argc, char** argv) {
  return medfuse::cli::run(std::vector<std::string>(argv, argv + argc));
}

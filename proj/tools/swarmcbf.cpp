#include <swarmcbf/cli.hpp>

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return swarmcbf::run_cli(std::move(args));
}

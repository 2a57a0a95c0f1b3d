// frboost CLI entry point. All orchestration logic lives in the core library
// (frboost/runner.hpp) so it stays testable in-process; this translation unit
// only adapts argv.
#include <string>
#include <vector>

#include <frboost/runner.hpp>

int main(int argc, char** argv) {
  return frboost::run::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "clinlm/cli/cli.hpp"

int main(int argc, char** argv) {
  clinlm::cli::install_signal_handlers();
  std::vector<std::string> args(argv + 1, argv + argc);
  return clinlm::cli::run(args, std::cout, std::cerr);
}

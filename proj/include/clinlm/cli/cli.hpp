// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

// The clinlm command line. Exit codes: 0 success, 1 validation or runtime
// failure (reported as "error: <category>: <message>" on one line), 2 usage
// error, 130 when interrupted after writing what was finished.
#pragma once

#include <atomic>
#include <ostream>
#include <string>
#include <vector>

namespace clinlm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInterrupted = 130;

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Set by SIGINT/SIGTERM; training loops poll it between steps.
std::atomic<bool>& stop_flag();
void install_signal_handlers();

// `git describe` of the source tree at configure time.
std::string version();

}  // namespace clinlm::cli

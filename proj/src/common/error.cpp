// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/common/error.hpp"

namespace clinlm {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kSchema: return "schema";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kFabric: return "fabric";
    case ErrorKind::kValue: return "value";
  }
  return "unknown";
}

}  // namespace clinlm

// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace clinlm {

enum class ErrorKind {
  kConfig,
  kShape,
  kSchema,
  kIo,
  kNumeric,
  kFabric,
  kValue,
};

std::string_view error_kind_name(ErrorKind kind);

// Base for every error raised by the library. The kind doubles as the
// machine-readable category printed by the command-line tool.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kShape, what) {}
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& what) : Error(ErrorKind::kSchema, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::kNumeric, what) {}
};

class FabricError : public Error {
 public:
  explicit FabricError(const std::string& what) : Error(ErrorKind::kFabric, what) {}
};

class ValueError : public Error {
 public:
  explicit ValueError(const std::string& what) : Error(ErrorKind::kValue, what) {}
};

}  // namespace clinlm

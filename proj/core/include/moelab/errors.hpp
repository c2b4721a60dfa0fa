// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

/// Base error; exit_code() is what the CLI process returns for it.
class Error : public std::runtime_error {
 public:
  Error(int exit_code, const std::string& what)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

/// Bad call or bad command line (exit 2).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& w) : Error(2, w) {}
};

/// Invalid configuration, including shape mismatches (exit 3).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& w) : Error(3, w) {}
};

/// Malformed input files or artifacts (exit 4).
class DataFormatError : public Error {
 public:
  explicit DataFormatError(const std::string& w) : Error(4, w) {}
};

/// Non-finite values or degenerate numeric states (exit 5).
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& w) : Error(5, w) {}
};

/// Broken internal invariant (exit 1).
class InternalError : public Error {
 public:
  explicit InternalError(const std::string& w) : Error(1, w) {}
};

}  // namespace moelab

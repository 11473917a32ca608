// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace polyroute {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: bad head count, unknown method, inconsistent dims.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent task data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Task not registered with the router.
class RoutingError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values produced by a forward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Optimization diverged.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace polyroute

// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace febcache {

/// A cached component was requested before any step wrote it.
class CacheMissError : public std::runtime_error {
public:
    CacheMissError(const std::string& what, int step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    int step() const noexcept { return step_; }

private:
    int step_;
};

/// A cache table that cannot be executed. `step()` is the first offending
/// denoising step, or -1 when the table as a whole is malformed.
class InvalidTableError : public std::runtime_error {
public:
    InvalidTableError(const std::string& what, int step)
        : std::runtime_error(step >= 0 ? what + " (step " + std::to_string(step) + ")" : what),
          step_(step) {}

    int step() const noexcept { return step_; }

private:
    int step_;
};

/// Two inputs that must be paired (same seed, same schedule) are not.
class IncompatibleInputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File could not be read, written or parsed.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace febcache

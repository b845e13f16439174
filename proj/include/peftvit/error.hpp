// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace peftvit {

/// Base of every error thrown by the library. The subclasses mirror the
/// categories callers are expected to branch on (the CLI maps them to exit
/// codes).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents are invalid or incompatible with an operation.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

/// Data values are out of their admissible domain (labels, fractions, ...).
class InputError : public Error {
public:
    explicit InputError(const std::string& what) : Error("input error: " + what) {}
};

/// An API was called in a state where it is not allowed.
class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error("usage error: " + what) {}
};

/// A ViT configuration violates its invariants.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

/// An expansion or adapter specification is invalid for the model.
class SpecError : public Error {
public:
    explicit SpecError(const std::string& what) : Error("spec error: " + what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("io error: " + what) {}
};

/// A file does not follow the expected binary layout.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

class VersionError : public Error {
public:
    explicit VersionError(const std::string& what) : Error("version error: " + what) {}
};

}  // namespace peftvit

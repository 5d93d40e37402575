// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace signstream {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Bad magic bytes or unsupported version in a binary file.
class FormatError : public Error {
public:
  using Error::Error;
};

// Payload shorter than the header declares.
class LengthError : public Error {
public:
  using Error::Error;
};

// Shape or dimensionality disagreement between two pieces of data.
class SchemaError : public Error {
public:
  using Error::Error;
};

// A caller-supplied argument is out of its documented range.
class ArgumentError : public Error {
public:
  using Error::Error;
};

// A documented precondition of an operation does not hold.
class PreconditionError : public Error {
public:
  using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

// Labels or records that fail validation (e.g. class id out of range).
class DataError : public Error {
public:
  using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
public:
  using Error::Error;
};

// Pose landmarks that admit no normalization (coincident shoulders).
class DegeneratePoseError : public Error {
public:
  using Error::Error;
};

// Loss/parameters became non-finite during training.
class NumericError : public Error {
public:
  using Error::Error;
};

// A masked-prediction loss was requested with zero masked cells.
class NoTargetError : public Error {
public:
  using Error::Error;
};

} // namespace signstream

#pragma once

#include <stdexcept>
#include <string>

namespace rebasin {

// Base of every error thrown by the library. The CLI maps subclasses to exit
// codes, so keep the hierarchy flat and specific.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class BijectionError : public Error {
 public:
  using Error::Error;
};

class ArchMismatchError : public Error {
 public:
  using Error::Error;
};

class UnknownVariableError : public Error {
 public:
  using Error::Error;
};

class IncompleteAssignmentError : public Error {
 public:
  using Error::Error;
};

// File-level problems: unreadable paths, malformed manifests, truncated blobs.
class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// Checkpoint-content errors carry the offending tensor name.
class TensorError : public FormatError {
 public:
  TensorError(const std::string& tensor, const std::string& what)
      : FormatError(tensor + ": " + what), tensor_(tensor) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

class MissingTensorError : public TensorError {
 public:
  using TensorError::TensorError;
};

class TensorShapeError : public TensorError {
 public:
  using TensorError::TensorError;
};

class NonFiniteTensorError : public TensorError {
 public:
  using TensorError::TensorError;
};

class UnexpectedTensorError : public TensorError {
 public:
  using TensorError::TensorError;
};

}  // namespace rebasin

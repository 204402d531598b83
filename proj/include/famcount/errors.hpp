#pragma once

#include <stdexcept>
#include <string>

namespace famcount {

// Base for every error raised by the library. Callers that only need to
// report a failure can catch this; the subclasses exist so the CLI and the
// HTTP service can map failures to exit codes / status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  ValidationError(std::string image_id, std::string field, const std::string& what)
      : Error("image '" + image_id + "', field '" + field + "': " + what),
        image_id_(std::move(image_id)),
        field_(std::move(field)) {}

  const std::string& image_id() const { return image_id_; }
  const std::string& field() const { return field_; }

 private:
  std::string image_id_;
  std::string field_;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class DegenerateExemplarError : public Error {
 public:
  using Error::Error;
};

class EmptyAnnotationError : public Error {
 public:
  using Error::Error;
};

class OutOfBoundsError : public Error {
 public:
  using Error::Error;
};

class ImageTooSmallError : public Error {
 public:
  using Error::Error;
};

class KernelTooLargeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace famcount

#pragma once

#include <stdexcept>
#include <string>

namespace rls {

/// Base of every error raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class RankDeficiencyError : public Error {
 public:
  using Error::Error;
};

/// Training aborted by a divergence / collapse guard.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// A required upstream artifact is missing. `producer` names the command that
/// creates it.
class DependencyError : public Error {
 public:
  DependencyError(const std::string& what_missing, std::string producer)
      : Error("missing " + what_missing + " (run `" + producer + "` first)"),
        producer_(std::move(producer)) {}
  const std::string& producer() const { return producer_; }

 private:
  std::string producer_;
};

/// Raised by a measurement that cannot be taken on the given image.
class MeasurementError : public Error {
 public:
  using Error::Error;
};

}  // namespace rls

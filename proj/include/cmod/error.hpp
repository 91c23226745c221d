#pragma once

#include <stdexcept>
#include <string>

namespace cmod {

// Every domain error carries a stable class name; the CLI prints it as the
// one-line diagnostic and tests match on it.
class Error : public std::runtime_error {
 public:
  Error(std::string class_name, const std::string& what)
      : std::runtime_error(class_name + ": " + what), class_name_(std::move(class_name)) {}

  const std::string& class_name() const noexcept { return class_name_; }

 private:
  std::string class_name_;
};

#define CMOD_DEFINE_ERROR(Name)                                              \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& what) : Error(#Name, what) {}           \
                                                                             \
   protected:                                                                \
    Name(std::string class_name, const std::string& what)                    \
        : Error(std::move(class_name), what) {}                              \
  };

// ingest
CMOD_DEFINE_ERROR(MalformedRow)
CMOD_DEFINE_ERROR(UnknownNode)
CMOD_DEFINE_ERROR(NonMonotonicTimestamp)
CMOD_DEFINE_ERROR(InvalidArgument)

// memory / model
CMOD_DEFINE_ERROR(NodeNotEndpoint)
CMOD_DEFINE_ERROR(TimeRegression)
CMOD_DEFINE_ERROR(DegenerateNormalizer)
CMOD_DEFINE_ERROR(DimensionMismatch)

// autodiff
CMOD_DEFINE_ERROR(ShapeError)
CMOD_DEFINE_ERROR(NotScalar)
CMOD_DEFINE_ERROR(NonFiniteValue)
CMOD_DEFINE_ERROR(TapeReused)

// training / persistence
CMOD_DEFINE_ERROR(EmptyTrainSplit)
CMOD_DEFINE_ERROR(IoError)
CMOD_DEFINE_ERROR(VersionMismatch)
CMOD_DEFINE_ERROR(ChecksumMismatch)

// evaluation
CMOD_DEFINE_ERROR(LengthMismatch)

// cli
CMOD_DEFINE_ERROR(UsageError)

#undef CMOD_DEFINE_ERROR

// A checkpoint whose arrays do not fit the requested hyperparameters.
class ShapeMismatch : public VersionMismatch {
 public:
  explicit ShapeMismatch(const std::string& what) : VersionMismatch("ShapeMismatch", what) {}
};

}  // namespace cmod

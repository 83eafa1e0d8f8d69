#pragma once

#include <stdexcept>
#include <string>

namespace endodepth {

/// Coarse error class, used by the CLI to pick an exit code.
enum class ErrorClass { Config, Data, Numerical, Io };

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), class_(cls) {}
  ErrorClass error_class() const noexcept { return class_; }

 private:
  ErrorClass class_;
};

#define ENDODEPTH_DEFINE_ERROR(Name, Class)                                          \
  class Name : public Error {                                                      \
   public:                                                                         \
    explicit Name(const std::string& what) : Error(ErrorClass::Class, #Name ": " + what) {} \
  };

// generic precondition failure
ENDODEPTH_DEFINE_ERROR(InvalidArgument, Config)
// geometry
ENDODEPTH_DEFINE_ERROR(PointBehindCamera, Numerical)
ENDODEPTH_DEFINE_ERROR(InvalidDepth, Numerical)
// scene simulation
ENDODEPTH_DEFINE_ERROR(SceneCoverage, Data)
ENDODEPTH_DEFINE_ERROR(InsufficientParallax, Data)
// supervision
ENDODEPTH_DEFINE_ERROR(InsufficientObservations, Data)
ENDODEPTH_DEFINE_ERROR(EmptyAnnotation, Data)
ENDODEPTH_DEFINE_ERROR(ReferentialIntegrityError, Data)
// autodiff / losses
ENDODEPTH_DEFINE_ERROR(ShapeError, Config)
ENDODEPTH_DEFINE_ERROR(NumericalError, Numerical)
ENDODEPTH_DEFINE_ERROR(WarpOutOfView, Data)
// model / trainer
ENDODEPTH_DEFINE_ERROR(ModelConfigError, Config)
ENDODEPTH_DEFINE_ERROR(EmptyDataset, Data)
// eval
ENDODEPTH_DEFINE_ERROR(EmptyCloud, Data)
ENDODEPTH_DEFINE_ERROR(DegenerateAlignment, Numerical)
// io
ENDODEPTH_DEFINE_ERROR(ParseError, Data)
ENDODEPTH_DEFINE_ERROR(ManifestError, Io)
ENDODEPTH_DEFINE_ERROR(VersionError, Data)
ENDODEPTH_DEFINE_ERROR(IoError, Io)

#undef ENDODEPTH_DEFINE_ERROR

}  // namespace endodepth

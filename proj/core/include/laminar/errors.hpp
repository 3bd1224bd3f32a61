#pragma once

#include <stdexcept>
#include <string>

namespace laminar {

// Base for all framework errors. `kind()` is the stable machine-readable
// name; what() carries kind + detail.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg.empty() ? kind : kind + ": " + msg),
        kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define LAMINAR_DEFINE_ERROR(Name)                    \
  class Name : public Error {                         \
   public:                                            \
    explicit Name(const std::string& msg = "")        \
        : Error(#Name, msg) {}                        \
  };

// tensor_core
LAMINAR_DEFINE_ERROR(ShapeMismatch)
LAMINAR_DEFINE_ERROR(DomainError)
LAMINAR_DEFINE_ERROR(EmptyReduction)
LAMINAR_DEFINE_ERROR(IndexError)
LAMINAR_DEFINE_ERROR(NotScalar)
LAMINAR_DEFINE_ERROR(NoTape)
LAMINAR_DEFINE_ERROR(BatchTooSmall)
// type_dispatch
LAMINAR_DEFINE_ERROR(UnknownType)
LAMINAR_DEFINE_ERROR(NoMatch)
// transform_pipeline
LAMINAR_DEFINE_ERROR(EmptySetupSample)
LAMINAR_DEFINE_ERROR(IndexOutOfRange)
LAMINAR_DEFINE_ERROR(UnknownCategory)
LAMINAR_DEFINE_ERROR(PipelineError)
// data_loading
LAMINAR_DEFINE_ERROR(CollateError)
LAMINAR_DEFINE_ERROR(EmptySource)
LAMINAR_DEFINE_ERROR(UnknownDataset)
LAMINAR_DEFINE_ERROR(ChecksumMismatch)
LAMINAR_DEFINE_ERROR(NetworkError)
// data_block
LAMINAR_DEFINE_ERROR(EmptyItems)
LAMINAR_DEFINE_ERROR(EmptyTrainSplit)
LAMINAR_DEFINE_ERROR(GetterError)
// optim
LAMINAR_DEFINE_ERROR(MissingGrad)
LAMINAR_DEFINE_ERROR(LengthMismatch)
// learner / export
LAMINAR_DEFINE_ERROR(VersionMismatch)
LAMINAR_DEFINE_ERROR(ExportError)
LAMINAR_DEFINE_ERROR(ParseError)
// schedule
LAMINAR_DEFINE_ERROR(AllDiverged)
// metrics
LAMINAR_DEFINE_ERROR(FlattenMismatch)

#undef LAMINAR_DEFINE_ERROR

}  // namespace laminar

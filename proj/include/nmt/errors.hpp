#pragma once

#include <stdexcept>
#include <string>

namespace nmt {

// Base of every error thrown by the toolkit. The CLI maps ConfigError to exit
// code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define NMT_DEFINE_ERROR(Name)          \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  };

NMT_DEFINE_ERROR(DimensionError)
NMT_DEFINE_ERROR(InvalidMaskError)
NMT_DEFINE_ERROR(ConfigError)
NMT_DEFINE_ERROR(ContractError)
NMT_DEFINE_ERROR(IndexError)
NMT_DEFINE_ERROR(NumericalError)
NMT_DEFINE_ERROR(InputError)
NMT_DEFINE_ERROR(FormatError)
NMT_DEFINE_ERROR(VersionError)
NMT_DEFINE_ERROR(IoError)
NMT_DEFINE_ERROR(LengthError)
NMT_DEFINE_ERROR(CapabilityError)

#undef NMT_DEFINE_ERROR

}  // namespace nmt

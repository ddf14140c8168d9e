#pragma once

#include <stdexcept>
#include <string>

namespace kanmix {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define KANMIX_DEFINE_ERROR(Name) \
  class Name : public Error {     \
   public:                        \
    using Error::Error;           \
  }

KANMIX_DEFINE_ERROR(ShapeMismatch);
KANMIX_DEFINE_ERROR(RankError);
KANMIX_DEFINE_ERROR(InvalidGrid);
KANMIX_DEFINE_ERROR(InvalidDim);
KANMIX_DEFINE_ERROR(StaleCache);
KANMIX_DEFINE_ERROR(PatchDivisibility);
KANMIX_DEFINE_ERROR(ConfigError);

// Malformed or missing files and datasets.
class DataError : public Error {
 public:
  using Error::Error;
};

#define KANMIX_DEFINE_DATA_ERROR(Name) \
  class Name : public DataError {      \
   public:                             \
    using DataError::DataError;        \
  }

KANMIX_DEFINE_DATA_ERROR(BadMagic);
KANMIX_DEFINE_DATA_ERROR(TruncatedFile);
KANMIX_DEFINE_DATA_ERROR(CountMismatch);
KANMIX_DEFINE_DATA_ERROR(FileError);
KANMIX_DEFINE_DATA_ERROR(LabelOutOfRange);

#undef KANMIX_DEFINE_ERROR
#undef KANMIX_DEFINE_DATA_ERROR

}  // namespace kanmix

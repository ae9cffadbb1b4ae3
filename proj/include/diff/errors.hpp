#pragma once

#include <stdexcept>
#include <string>

namespace diff {

/// Broad failure classes; the CLI maps them onto exit codes.
enum class ErrorClass { kUsage, kData, kNumeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
  ErrorClass error_class() const noexcept { return cls_; }

 private:
  ErrorClass cls_;
};

#define DIFF_DEFINE_ERROR(Name, Class)                                     \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(ErrorClass::Class, what) {} \
  };

DIFF_DEFINE_ERROR(ShapeError, kNumeric)
DIFF_DEFINE_ERROR(DegenerateRowError, kNumeric)
DIFF_DEFINE_ERROR(IndexError, kNumeric)
DIFF_DEFINE_ERROR(NumericError, kNumeric)
DIFF_DEFINE_ERROR(SpectralIndexError, kNumeric)
DIFF_DEFINE_ERROR(CutoffError, kUsage)
DIFF_DEFINE_ERROR(DivergenceError, kNumeric)
DIFF_DEFINE_ERROR(EmptySequenceError, kData)
DIFF_DEFINE_ERROR(CatalogError, kData)
DIFF_DEFINE_ERROR(ParseError, kData)
DIFF_DEFINE_ERROR(EmptyDatasetError, kData)
DIFF_DEFINE_ERROR(EmptySplitError, kData)
DIFF_DEFINE_ERROR(ConfigError, kUsage)

#undef DIFF_DEFINE_ERROR

}  // namespace diff

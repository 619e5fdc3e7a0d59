#pragma once

#include <stdexcept>
#include <string>

namespace srpl {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define SRPL_DEFINE_ERROR(Name)                 \
    class Name : public Error {                 \
    public:                                     \
        using Error::Error;                     \
    }

SRPL_DEFINE_ERROR(InvalidArgument);
SRPL_DEFINE_ERROR(FormatError);
SRPL_DEFINE_ERROR(UnsupportedFormat);
SRPL_DEFINE_ERROR(ShapeError);
SRPL_DEFINE_ERROR(EmptyDataset);
SRPL_DEFINE_ERROR(DegenerateDomain);
SRPL_DEFINE_ERROR(DegenerateImage);
SRPL_DEFINE_ERROR(EmptyPseudoLabel);
SRPL_DEFINE_ERROR(SegmenterIoError);
SRPL_DEFINE_ERROR(NumericError);
SRPL_DEFINE_ERROR(ConfigError);
SRPL_DEFINE_ERROR(MissingArtifact);

// A timeout is an I/O failure too; callers catching SegmenterIoError see both.
class SegmenterTimeout : public SegmenterIoError {
public:
    using SegmenterIoError::SegmenterIoError;
};

#undef SRPL_DEFINE_ERROR

}  // namespace srpl

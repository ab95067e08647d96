#pragma once

#include <stdexcept>
#include <string>

namespace sigfit {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : Error { using Error::Error; };
struct DegenerateSeries : Error { using Error::Error; };
struct InsufficientGroups : Error { using Error::Error; };
struct NotFound : Error { using Error::Error; };
struct NotConverged : Error { using Error::Error; };
struct NoInflection : Error { using Error::Error; };
struct SchemaError : Error { using Error::Error; };
struct CorruptFeed : Error { using Error::Error; };
struct UnknownGroup : Error { using Error::Error; };
struct BelowThreshold : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ValidationError : Error { using Error::Error; };

}  // namespace sigfit

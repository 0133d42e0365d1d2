#pragma once

#include <stdexcept>
#include <string>

namespace iisan {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct TapeError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct CacheError : Error {
    using Error::Error;
};

}  // namespace iisan

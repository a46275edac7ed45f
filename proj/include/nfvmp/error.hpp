#pragma once

#include <stdexcept>
#include <string>

namespace nfvmp {

/// Raised on invalid input or numerical breakdown anywhere in the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised for malformed or incomplete scenario configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace nfvmp

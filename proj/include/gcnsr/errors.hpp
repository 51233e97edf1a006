#ifndef GCNSR_ERRORS_HPP
#define GCNSR_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace gcnsr {

/// Root of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not fit the operation; the message names the axis.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Bad or inconsistent configuration (unknown keys, invalid variants, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Batch statistics cannot be formed (fewer than two samples per channel).
class DegenerateStatisticsError : public Error {
public:
    using Error::Error;
};

/// A required external resource (feature network, file) is unavailable.
class InterfaceError : public Error {
public:
    using Error::Error;
};

/// Corrupt or truncated archive.
class IntegrityError : public Error {
public:
    using Error::Error;
};

class VersionError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf where finite values are required.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Input data out of range, unreadable, or empty.
class DataError : public Error {
public:
    using Error::Error;
};

} // namespace gcnsr

#endif

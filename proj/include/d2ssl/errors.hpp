#pragma once

#include <stdexcept>
#include <string>

namespace d2ssl {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed IDX, checkpoint or snapshot bytes.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A loss or gradient went non-finite.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ScheduleError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Attempted a pseudo-logit step on a labeled (frozen) record.
class FrozenUpdateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

} // namespace d2ssl

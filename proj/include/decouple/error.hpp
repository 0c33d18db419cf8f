#pragma once

#include <stdexcept>
#include <string>

namespace decouple {

/// Invalid configuration or a method/dataset mismatch detected before work starts.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input data violates a documented contract (malformed record, gold missing, ...).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when an operation would mutate parameters that were frozen.
class FrozenError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

}  // namespace decouple

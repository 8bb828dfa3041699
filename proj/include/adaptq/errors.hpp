#pragma once

#include <stdexcept>
#include <string>

namespace adaptq {

/// Violated precondition on a caller-supplied value.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent file content. Messages carry row/cell context.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operation not valid in the current session or harness state.
class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// LLM transport failed after exhausting retries, or a transport
/// was asked about something it cannot answer.
class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Rejected credentials. Generation aborts on this instead of retrying.
class AuthError : public TransportError {
public:
    using TransportError::TransportError;
};

}  // namespace adaptq

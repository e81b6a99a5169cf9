#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace forge {

/// A protocol contract was violated (stepping a terminal episode, broadcasting
/// across mismatched persistent memory, ...).
class ProtocolError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class InvalidActionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace forge

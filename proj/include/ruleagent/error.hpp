#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ruleagent {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class BoundsError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    using Error::Error;
};

class EmptyDatasetError : public Error {
public:
    using Error::Error;
};

class EmptyEvaluationError : public Error {
public:
    using Error::Error;
};

/// Text that does not follow an expected grammar. `line` is 1-based (0 when
/// unknown), `offset` is the byte offset into the parsed text.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0, std::size_t offset = 0)
        : Error(what), line_(line), offset_(offset)
    {
    }

    std::size_t line() const noexcept { return line_; }
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t line_;
    std::size_t offset_;
};

/// Persisted file that cannot be read back.
class LoadError : public Error {
public:
    LoadError(const std::string& what, std::size_t line = 0) : Error(what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class TransportError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

class PlanningError : public Error {
public:
    using Error::Error;
};

} // namespace ruleagent

#pragma once

#include <stdexcept>
#include <string>

namespace rhm {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Parameters violate a documented precondition (exit code 1 in the CLI).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Input tokens contain a patch that no rule produces.
class UndecodableInput : public Error {
public:
    using Error::Error;
};

/// Malformed or schema-violating serialized data. The message names the JSON path.
class ParseError : public Error {
public:
    using Error::Error;
};

/// A loaded object violates a structural invariant.
class InvariantError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class UnknownPatch : public Error {
public:
    using Error::Error;
};

/// |<1, Wx>| fell below the normalization guard. level() is 0 when unknown.
class DegenerateNormalization : public Error {
public:
    explicit DegenerateNormalization(const std::string& what, int level = 0) : Error(what), level_(level) {}
    int level() const noexcept { return level_; }

private:
    int level_;
};

class NumericError : public Error {
public:
    using Error::Error;
};

/// Gradient descent diverged at both the configured and the fallback step size.
class StepSizeError : public Error {
public:
    using Error::Error;
};

/// A layerwise training stage could not be completed; names the level.
class StageFailure : public Error {
public:
    StageFailure(int level, const std::string& what)
        : Error("stage " + std::to_string(level) + ": " + what), level_(level) {}
    int level() const noexcept { return level_; }

private:
    int level_;
};

class UndefinedModel : public Error {
public:
    using Error::Error;
};

class EmptyResult : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Boolean input with an entry other than +1 / -1.
class DomainError : public Error {
public:
    using Error::Error;
};

class AmbiguousSupport : public Error {
public:
    using Error::Error;
};

}  // namespace rhm

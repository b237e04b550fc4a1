#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace feddgm {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Raised by graph evaluation when a node produces NaN or Inf.
class NonFiniteError : public Error {
public:
    NonFiniteError(std::size_t node, const std::string& what)
        : Error(what), node_(node) {}
    std::size_t node() const noexcept { return node_; }

private:
    std::size_t node_;
};

/// Invalid user-supplied configuration or argument; the CLI maps it to exit code 1.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed file on disk (bad magic, truncated payload, shape mismatch).
class FormatError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

/// The MTT denominator ||theta_g - theta_m||^2 is zero.
class ClientDidNotMoveError : public Error {
public:
    using Error::Error;
};

/// A linear system in the theory sandbox has no usable solution.
class SingularSystemError : public Error {
public:
    using Error::Error;
};

/// Every participant of a federated round was skipped.
class RoundAbortedError : public Error {
public:
    using Error::Error;
};

} // namespace feddgm

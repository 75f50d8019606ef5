#pragma once

#include <stdexcept>
#include <string>

namespace ibcl {

/// Bad input: dimension mismatch, simplex violation, malformed file or
/// config. The CLI maps this to exit status 2.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Failure while doing legitimate work (diverged training, rejection sampler
/// giving up, I/O). The CLI maps this to exit status 1.
class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError(what);
}

} // namespace ibcl

#pragma once

#include <stdexcept>
#include <string>

namespace tracer {

// Base for all toolkit errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: config fields, CLI arguments, malformed files, violated
// preconditions. The CLI maps these to exit code 2.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// Constant activations have zero self-HSIC, so their CKA is undefined.
// Callers decide how to group across such taps.
class DegenerateRepresentationError : public Error {
public:
    explicit DegenerateRepresentationError(const std::string& msg) : Error(msg) {}
};

}  // namespace tracer

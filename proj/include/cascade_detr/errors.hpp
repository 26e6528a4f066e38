#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cdetr {

// Stable, machine-parsable codes surfaced by the CLI as `error[<code>]: <text>`.
enum class ErrorCode {
    shape_mismatch,
    precondition,
    invalid_box,
    non_finite,
    parse,
    io,
    config,
    checkpoint,
    divergence,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error(ErrorCode::shape_mismatch, what) {}
};

class PreconditionError : public Error {
public:
    explicit PreconditionError(const std::string& what) : Error(ErrorCode::precondition, what) {}
};

}  // namespace cdetr

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ett {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

enum class ErrorCode {
    invalid_argument,
    shape_mismatch,
    non_finite,
    io,
    config,
    checkpoint,
    missing_upstream,
    nan_abort,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

class ShapeError : public Error {
public:
    ShapeError(std::string op, Shape lhs, Shape rhs, const std::string& detail = {});

    const std::string& op() const noexcept { return op_; }
    const Shape& lhs() const noexcept { return lhs_; }
    const Shape& rhs() const noexcept { return rhs_; }

private:
    std::string op_;
    Shape lhs_;
    Shape rhs_;
};

class NonFiniteError : public Error {
public:
    NonFiniteError(const std::string& what, std::int64_t position)
        : Error(ErrorCode::non_finite, what), position_(position) {}
    std::int64_t position() const noexcept { return position_; }

private:
    std::int64_t position_;
};

class CheckpointError : public Error {
public:
    enum class Kind { bad_magic, version_mismatch, shape_mismatch, config_mismatch, truncated, io, missing_group };

    CheckpointError(Kind kind, const std::string& what) : Error(ErrorCode::checkpoint, what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

class MissingUpstreamError : public Error {
public:
    MissingUpstreamError(std::string stage, const std::string& path)
        : Error(ErrorCode::missing_upstream,
                "missing upstream checkpoint for stage '" + stage + "' (expected at " + path + ")"),
          stage_(std::move(stage)) {}
    const std::string& required_stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

class NanAbortError : public Error {
public:
    NanAbortError(std::string param, std::int64_t step)
        : Error(ErrorCode::nan_abort,
                "non-finite gradient in parameter '" + param + "' at step " + std::to_string(step)),
          param_(std::move(param)), step_(step) {}
    const std::string& param() const noexcept { return param_; }
    std::int64_t step() const noexcept { return step_; }

private:
    std::string param_;
    std::int64_t step_;
};

}  // namespace ett

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ett/grad_check.hpp"
#include "ett/lm_bridge.hpp"
#include "ett/params.hpp"

ETT_NAMESPACE_BEGIN

struct GradCheckReport {
    std::string name;
    double max_rel_error = 0;
    double threshold = 0;
    bool passed = false;
    std::string note;  // e.g. how a non-differentiable forward was checked
    // Largest |gradient| per parameter group (end-to-end checks only).
    std::map<std::string, double> grad_max;
};

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;

std::vector<std::string> gradcheck_op_names();
bool is_gradcheck_op(const std::string& name);

// Finite-difference check of one op on random inputs drawn from `seed`.
// Throws Error(invalid_argument) for unknown names.
GradCheckReport check_op(const std::string& name, std::uint64_t seed);

// image -> encode -> quantize -> project -> LM -> caption loss on a tiny
// model. The hard code selection is held fixed for the numeric side, so the
// analytic gradient is compared with the surrogate the quantizer defines.
GradCheckReport check_end_to_end(std::uint64_t seed);

// Largest |d caption loss / d param| for every group of the tiny model.
std::map<Group, double> caption_gradient_magnitudes(std::uint64_t seed, InputMode mode);

ETT_NAMESPACE_END

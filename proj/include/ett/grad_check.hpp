#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ett/tensor.hpp"

ETT_NAMESPACE_BEGIN

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::vector<double> per_input;  // max error for each input tensor
};

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

// Compares reverse-mode gradients of `fn` against central differences for
// every coordinate of every input. The error of one coordinate is
// |analytic - numeric| / max(1, |analytic|, |numeric|); a NaN on either
// side counts as an infinite error. Inputs must be leaves.
GradCheckResult grad_check(const ScalarFn& fn, std::span<const Tensor> inputs, double eps = 1e-5);

ETT_NAMESPACE_END

#include "ett/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

ETT_NAMESPACE_BEGIN

GradCheckResult grad_check(const ScalarFn& fn, std::span<const Tensor> inputs, double eps) {
    std::vector<Tensor> xs(inputs.begin(), inputs.end());
    for (auto& x : xs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    backward(fn(xs));

    GradCheckResult result;
    result.per_input.assign(xs.size(), 0.0);
    NoGradGuard no_grad;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        auto values = xs[t].mutable_values();
        const auto grad = xs[t].grad();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const Real saved = values[i];
            values[i] = static_cast<Real>(saved + eps);
            const double up = fn(xs).item();
            values[i] = static_cast<Real>(saved - eps);
            const double down = fn(xs).item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
            double err = std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
            if (std::isnan(analytic) || std::isnan(numeric)) err = std::numeric_limits<double>::infinity();
            result.per_input[t] = std::max(result.per_input[t], err);
        }
        result.max_rel_error = std::max(result.max_rel_error, result.per_input[t]);
    }
    return result;
}

ETT_NAMESPACE_END

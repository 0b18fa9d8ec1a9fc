#include "ett/checks.hpp"

#include "ett/gradcheck_suite.hpp"

namespace ett::checks {

namespace {

CheckLine convert(const f64::GradCheckReport& r) {
    return {r.name, r.max_rel_error, r.threshold, r.passed, r.note, r.grad_max};
}

}  // namespace

std::vector<std::string> op_names() { return f64::gradcheck_op_names(); }
bool is_op(const std::string& name) { return f64::is_gradcheck_op(name); }
CheckLine check_op(const std::string& name, std::uint64_t seed) { return convert(f64::check_op(name, seed)); }
CheckLine check_end_to_end(std::uint64_t seed) { return convert(f64::check_end_to_end(seed)); }

std::map<std::string, double> caption_gradient_magnitudes(std::uint64_t seed, bool index_mode) {
    std::map<std::string, double> out;
    const auto mode = index_mode ? f64::InputMode::index : f64::InputMode::embedding;
    for (const auto& [g, v] : f64::caption_gradient_magnitudes(seed, mode)) out[std::string(f64::group_name(g))] = v;
    return out;
}

}  // namespace ett::checks

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

// Gradient checks evaluated in 64-bit arithmetic, callable from any build.
namespace ett::checks {

struct CheckLine {
    std::string name;
    double max_rel_error = 0;
    double threshold = 0;
    bool passed = false;
    std::string note;
    std::map<std::string, double> grad_max;  // per parameter group, end-to-end only
};

std::vector<std::string> op_names();
bool is_op(const std::string& name);
CheckLine check_op(const std::string& name, std::uint64_t seed);
CheckLine check_end_to_end(std::uint64_t seed);
// Largest |d caption loss / d param| per group name.
std::map<std::string, double> caption_gradient_magnitudes(std::uint64_t seed, bool index_mode);

}  // namespace ett::checks

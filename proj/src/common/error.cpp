#include "ett/error.hpp"

#include <sstream>

namespace ett {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

ShapeError::ShapeError(std::string op, Shape lhs, Shape rhs, const std::string& detail)
    : Error(ErrorCode::shape_mismatch,
            op + ": shape mismatch " + shape_str(lhs) + " vs " + shape_str(rhs) + (detail.empty() ? "" : " (" + detail + ")")),
      op_(std::move(op)), lhs_(std::move(lhs)), rhs_(std::move(rhs)) {}

}  // namespace ett

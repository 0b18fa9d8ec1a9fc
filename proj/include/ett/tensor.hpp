#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ett/error.hpp"
#include "ett/precision.hpp"

ETT_NAMESPACE_BEGIN

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One record on the dynamic tape. `seq` is the insertion position; a node's
// inputs always have smaller sequence numbers than the node itself.
struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward;  // pushes this->grad into inputs

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
    Buffer& ensure_grad();
};

// Handle to a tape node. Copies share the underlying node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, Real value, bool requires_grad = false);
    static Tensor from(Shape shape, Buffer values, bool requires_grad = false);
    static Tensor from(Shape shape, std::span<const Real> values, bool requires_grad = false);
    static Tensor scalar(Real value, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(int axis) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return node_->numel(); }

    std::span<const Real> values() const { return node_->value; }
    // Mutable access for leaves only (parameter updates, test fixtures).
    std::span<Real> mutable_values();
    std::span<const Real> grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    Real item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on);
    void zero_grad();
    void drop_grad() { node_->grad.clear(); node_->grad.shrink_to_fit(); }

    const char* op() const { return node_->op; }
    std::uint64_t seq() const { return node_->seq; }
    Node& node() const { return *node_; }
    const NodePtr& ptr() const { return node_; }

private:
    NodePtr node_;
};

// Creates a node for an op output. Input references are kept only when
// gradient recording is on and some input requires a gradient.
Tensor make_result(const char* op, Shape shape, Buffer value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward);

// Reverse-mode sweep from a scalar root. Leaf gradients accumulate; interior
// gradients exist only during the sweep.
void backward(const Tensor& root);

bool grad_enabled();

// Disables tape recording for the lifetime of the guard (evaluation, sampling).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

ETT_NAMESPACE_END

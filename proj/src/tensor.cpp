#include "ett/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

ETT_NAMESPACE_BEGIN

namespace {

thread_local std::uint64_t g_next_seq = 1;
thread_local bool g_grad_enabled = true;

#if defined(__GLIBC__)
// Activation buffers are allocated and freed every step. Keeping them on the
// heap instead of fresh mmap regions avoids page faults on each reuse.
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}();
#endif

NodePtr new_node(Shape shape, Buffer value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    node->seq = g_next_seq++;
    return node;
}

}  // namespace

Buffer& Node::ensure_grad() {
    if (grad.empty()) {
        grad.assign(value.size(), Real(0));
    }
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), Real(0), requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    return Tensor(new_node(std::move(shape), Buffer(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, Buffer values, bool requires_grad) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        throw ShapeError("from", shape, Shape{static_cast<std::int64_t>(values.size())},
                         "value count does not match shape");
    }
    return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::from(Shape shape, std::span<const Real> values, bool requires_grad) {
    return from(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return full(Shape{}, value, requires_grad); }

std::int64_t Tensor::dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw Error(ErrorCode::invalid_argument, "axis " + std::to_string(axis) + " out of range for shape " +
                                                     shape_str(shape()));
    }
    return node_->shape[static_cast<std::size_t>(axis)];
}

std::span<Real> Tensor::mutable_values() {
    if (node_->backward) {
        throw Error(ErrorCode::invalid_argument, std::string("cannot mutate values of op output '") + node_->op + "'");
    }
    return node_->value;
}

Real Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item", shape(), Shape{}, "tensor is not a scalar");
    }
    return node_->value[0];
}

void Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (!on) drop_grad();
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(const char* op, Shape shape, Buffer value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    auto node = new_node(std::move(shape), std::move(value), needs);
    node->op = op;
    if (needs) {
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.ptr());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

void backward(const Tensor& root) {
    if (root.numel() != 1) {
        throw ShapeError("backward", root.shape(), Shape{}, "backward requires a scalar root");
    }
    if (!root.requires_grad()) return;

    // Collect every reachable node that carries a gradient.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{&root.node()};
    seen.insert(&root.node());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& in : n->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

    // Interior gradients start empty and are allocated by the first
    // contribution; a node nobody contributed to is skipped.
    for (Node* n : order) {
        if (n->backward) n->grad.clear();
    }
    Node& r = root.node();
    if (r.backward) {
        r.grad.assign(1, Real(1));
    } else {
        r.ensure_grad()[0] += Real(1);
    }
    for (Node* n : order) {
        if (!n->backward || n->grad.empty()) continue;
        n->backward(*n);
        // Interior gradients are consumed; release them for reuse.
        Buffer().swap(n->grad);
    }
}

ETT_NAMESPACE_END

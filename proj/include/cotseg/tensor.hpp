#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a graph node. Operations build new nodes
// that remember their inputs and a backward rule; backward() on a scalar
// walks the reachable nodes in reverse creation order, so each node runs
// after all of its consumers and exactly once.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cotseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
class Tensor;

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first needed
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::string op;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads self.grad and accumulates into parents' grad buffers.
    std::function<void(Node& self)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

std::uint64_t next_node_id();

}  // namespace detail

/// Thread-local switch; while disabled, operations record no graph.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from_data(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({}, {value}, requires_grad);
    }

    /// Throws DimensionError if data.size() != product(shape).
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    /// Direct write access; for parameter initialisation and optimizer
    /// updates only. Never mutate a tensor that a live graph depends on.
    std::span<T> mutable_data() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

    T item() const;
    T at(std::initializer_list<std::size_t> index) const;
    std::size_t offset(std::initializer_list<std::size_t> index) const;

    /// Copy of the values with no graph history.
    Tensor detach() const { return from_data(node_->shape, node_->data, false); }

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
    /// calls; interior gradients are recomputed each call.
    void backward() const;

    const std::string& op() const { return node_->op; }

    // Graph construction; used by operation implementations.
    using NodePtr = std::shared_ptr<detail::Node<T>>;
    const NodePtr& node() const { return node_; }
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

private:
    NodePtr node_;
};

namespace detail {

/// Wraps a freshly computed buffer into a tensor. The backward rule is
/// attached only when recording is enabled and some input requires grad.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn);

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn);

}  // namespace detail

namespace debug {
/// Test hook for fault injection: when enabled for an op name, that op's
/// backward rule deliberately corrupts its gradient. Supported: "conv3d".
void set_fault(std::string_view op, bool enabled);
bool fault_enabled(std::string_view op);

/// While enabled on the current thread, relu folds the sign pattern of its
/// inputs into a running signature. Finite-difference checks compare the
/// signatures at x+h and x-h to detect perturbations that cross a kink.
void set_kink_tracking(bool enabled);
bool kink_tracking();
void fold_kink_signature(std::uint64_t pattern_hash);
std::uint64_t kink_signature();
void reset_kink_signature();
}  // namespace debug

}  // namespace cotseg

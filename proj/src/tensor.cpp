#include "cotseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <set>
#include <sstream>
#include <unordered_set>

#include "cotseg/errors.hpp"

namespace cotseg {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {
std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}
}  // namespace detail

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <class T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    for (std::size_t e : shape)
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
        throw DimensionError("shape " + shape_str(shape) + " does not match buffer of " +
                             std::to_string(data.size()));
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->id = detail::next_node_id();
    node->op = "leaf";
    return Tensor(std::move(node));
}

template <class T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

template <class T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank mismatch");
    std::size_t off = 0;
    std::size_t i = 0;
    for (std::size_t v : index) {
        if (v >= node_->shape[i]) throw DimensionError("index out of range");
        off = off * node_->shape[i] + v;
        ++i;
    }
    return off;
}

template <class T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
    return node_->data[offset(index)];
}

template <class T>
void Tensor<T>::backward() const {
    if (!node_) throw ContractError("backward() on an undefined tensor");
    if (numel() != 1) throw ContractError("backward() requires a scalar, got shape " + shape_str(shape()));
    if (!node_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");

    // Collect reachable nodes that participate in differentiation.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<const detail::Node<T>*> seen;
    std::vector<detail::Node<T>*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    // Parents are always created before their consumers.
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id > b->id; });

    for (auto* n : order) {
        if (n->is_leaf())
            n->ensure_grad();
        else
            n->grad.assign(n->data.size(), T(0));
    }
    node_->grad[0] += T(1);
    for (auto* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      const std::vector<const Tensor<T>*>& inputs,
                      std::function<void(Node<T>&)> backward_fn) {
    auto out = Tensor<T>::from_data(std::move(shape), std::move(data), false);
    auto& node = *out.node();
    node.op = std::move(op);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto* t : inputs) any = any || t->requires_grad();
    if (!any) return out;
    node.requires_grad = true;
    for (const auto* t : inputs) node.parents.push_back(t->node());
    node.backward_fn = std::move(backward_fn);
    return out;
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
    return make_result<T>(std::move(shape), std::move(data), std::move(op),
                          std::vector<const Tensor<T>*>(inputs), std::move(backward_fn));
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn) {
    std::vector<const Tensor<T>*> ptrs;
    ptrs.reserve(inputs.size());
    for (const auto& t : inputs) ptrs.push_back(&t);
    return make_result<T>(std::move(shape), std::move(data), std::move(op), ptrs,
                          std::move(backward_fn));
}

template Tensor<float> make_result(Shape, std::vector<float>, std::string,
                                   std::initializer_list<const Tensor<float>*>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::string,
                                    std::initializer_list<const Tensor<double>*>,
                                    std::function<void(Node<double>&)>);
template Tensor<long double> make_result(Shape, std::vector<long double>, std::string,
                                         std::initializer_list<const Tensor<long double>*>,
                                         std::function<void(Node<long double>&)>);
template Tensor<long double> make_result(Shape, std::vector<long double>, std::string,
                                         const std::vector<Tensor<long double>>&,
                                         std::function<void(Node<long double>&)>);
template Tensor<float> make_result(Shape, std::vector<float>, std::string,
                                   const std::vector<Tensor<float>>&,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::string,
                                    const std::vector<Tensor<double>>&,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

namespace debug {
namespace {
std::mutex g_fault_mutex;
std::set<std::string, std::less<>> g_faults;
std::atomic<bool> g_any_fault{false};
}  // namespace

void set_fault(std::string_view op, bool enabled) {
    std::lock_guard lock(g_fault_mutex);
    if (enabled)
        g_faults.emplace(op);
    else if (auto it = g_faults.find(op); it != g_faults.end())
        g_faults.erase(it);
    g_any_fault = !g_faults.empty();
}

bool fault_enabled(std::string_view op) {
    if (!g_any_fault.load(std::memory_order_relaxed)) return false;
    std::lock_guard lock(g_fault_mutex);
    return g_faults.find(op) != g_faults.end();
}
namespace {
thread_local bool t_kink_tracking = false;
thread_local std::uint64_t t_kink_signature = 0;
}  // namespace

void set_kink_tracking(bool enabled) { t_kink_tracking = enabled; }
bool kink_tracking() { return t_kink_tracking; }
void fold_kink_signature(std::uint64_t pattern_hash) {
    t_kink_signature = (t_kink_signature ^ pattern_hash) * 0x100000001b3ULL + 0x9e3779b97f4a7c15ULL;
}
std::uint64_t kink_signature() { return t_kink_signature; }
void reset_kink_signature() { t_kink_signature = 0; }
}  // namespace debug

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<long double>;

}  // namespace cotseg

#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor<T> is a cheap handle onto a shared node. Nodes created by an op
// while grad mode is on keep references to their inputs plus a local
// gradient rule; Tensor::backward() orders the reachable nodes into a tape
// and replays the rules in reverse.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace rcn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool& checked_mode_flag() {
    thread_local bool enabled = false;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }
inline bool checked_mode() { return detail::checked_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool prev_;
};

// In checked mode every op rejects non-finite inputs.
class CheckedModeGuard {
   public:
    explicit CheckedModeGuard(bool on = true) : prev_(detail::checked_mode_flag()) {
        detail::checked_mode_flag() = on;
    }
    ~CheckedModeGuard() { detail::checked_mode_flag() = prev_; }
    CheckedModeGuard(const CheckedModeGuard&) = delete;
    CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

   private:
    bool prev_;
};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> rule;  // pushes this->grad into inputs
    std::string_view op = "leaf";

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
    bool is_leaf() const { return inputs.empty(); }
};

template <class T>
class Tensor {
   public:
    using value_type = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    Tensor(Shape shape, T fill, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value.assign(numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), T(0), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (numel(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        auto node = std::make_shared<Node<T>>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    // Direct write access, for initializing leaves and optimizer updates.
    std::span<T> mutable_data() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    T item() const {
        if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return node_->value[0];
    }
    T operator[](std::size_t i) const { return node_->value[i]; }

    // New leaf holding a copy of the value; no history.
    Tensor detach() const { return from(shape(), node_->value, false); }

    // Same storage viewed with a different shape (copy of the value, shared history).
    Tensor reshape(Shape new_shape) const;

    void backward() const;

    Node<T>* node() const { return node_.get(); }
    const NodePtr& node_ptr() const { return node_; }

   private:
    NodePtr node_;
};

// Ordered operation records reachable from a root; inputs always precede
// their consumers, so replaying rules back to front is the chain rule.
template <class T>
class Tape {
   public:
    explicit Tape(const Tensor<T>& root) {
        std::unordered_set<const Node<T>*> seen;
        // Iterative post-order DFS; avoids recursion depth limits on long chains.
        std::vector<std::pair<Node<T>*, std::size_t>> stack;
        if (root.node()->requires_grad) stack.emplace_back(root.node(), 0);
        seen.insert(root.node());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                Node<T>* child = node->inputs[next++].get();
                if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    const std::vector<Node<T>*>& records() const { return order_; }

    void replay() const {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Node<T>* node = *it;
            if (node->rule && !node->grad.empty()) node->rule(*node);
        }
    }

   private:
    std::vector<Node<T>*> order_;
};

template <class T>
void Tensor<T>::backward() const {
    if (size() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) throw std::logic_error("backward: loss does not require grad");
    Tape<T> tape(*this);
    node_->ensure_grad();
    node_->grad[0] += T(1);
    tape.replay();
}

namespace detail {

template <class T>
void check_finite(const Tensor<T>& t, std::string_view op) {
    if (!checked_mode()) return;
    const auto v = t.data();
    if (!Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(v.data(), static_cast<Eigen::Index>(v.size())).allFinite())
        throw NumericError(std::string(op) + ": non-finite input rejected");
}

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
    for (const auto* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

// Builds the result node of an op. The rule is only attached when some
// input needs a gradient and recording is enabled.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                      std::string_view op, std::function<void(Node<T>&)> rule) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    if (grad_enabled() && any_requires_grad<T>(inputs)) {
        node->requires_grad = true;
        for (const auto* t : inputs) node->inputs.push_back(t->defined() ? t->node_ptr() : nullptr);
        node->rule = std::move(rule);
    }
    return Tensor<T>(std::move(node));
}

// Gradient buffer of the k-th input when it participates in backprop, else null.
template <class T>
T* input_grad(Node<T>& out, std::size_t k) {
    auto& in = out.inputs[k];
    if (!in || !in->requires_grad) return nullptr;
    in->ensure_grad();
    return in->grad.data();
}

template <class T>
const std::vector<T>& input_value(const Node<T>& out, std::size_t k) {
    return out.inputs[k]->value;
}

}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
    if (numel(new_shape) != size())
        throw ShapeError("reshape: " + shape_str(shape()) + " -> " + shape_str(new_shape));
    return detail::make_result<T>(std::move(new_shape), node_->value, {this}, "reshape", [](Node<T>& out) {
        if (T* g = detail::input_grad(out, 0))
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    });
}

}  // namespace rcn

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cfmsep/rng.hpp"

namespace cfmsep {

class TensorError : public std::runtime_error {
public:
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += " x ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

template <class S>
struct NodeT;

template <class S>
using NodePtr = std::shared_ptr<NodeT<S>>;

// One tape node: value plus (when recording) parents and a pull-based backward
// closure that reads this node's grad and accumulates into the parents'.
template <class S>
struct NodeT {
    Shape shape;
    std::vector<S> value;
    bool requires_grad = false;
    std::vector<S> grad;  // allocated on first use
    std::vector<NodePtr<S>> parents;
    std::function<void(NodeT<S>&)> backward;
    const char* op = "leaf";

    std::vector<S>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), S(0));
        return grad;
    }
    bool is_leaf() const { return !backward; }
};

}  // namespace detail

// Grad recording is on by default; inference paths disable it so ops skip
// tape construction entirely.
inline bool& grad_recording_flag() {
    thread_local bool on = true;
    return on;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_recording_flag()) { grad_recording_flag() = false; }
    ~NoGradGuard() { grad_recording_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class S>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(detail::NodePtr<S> n) : node_(std::move(n)) {}

    static TensorT zeros(Shape shape) { return full(std::move(shape), S(0)); }

    static TensorT full(Shape shape, S v) {
        auto n = std::make_shared<detail::NodeT<S>>();
        n->shape = std::move(shape);
        n->value.assign(numel_of(n->shape), v);
        return TensorT(std::move(n));
    }

    static TensorT from_data(Shape shape, std::vector<S> data) {
        if (numel_of(shape) != static_cast<int64_t>(data.size()))
            throw TensorError("from_data: shape " + shape_str(shape) + " does not match " +
                              std::to_string(data.size()) + " values");
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v)))
                throw TensorError("from_data: non-finite input value");
        auto n = std::make_shared<detail::NodeT<S>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return TensorT(std::move(n));
    }

    static TensorT randn(Shape shape, RngStream& rng, double scale = 1.0) {
        auto n = std::make_shared<detail::NodeT<S>>();
        n->shape = std::move(shape);
        n->value.resize(numel_of(n->shape));
        for (auto& v : n->value) v = static_cast<S>(rng.normal() * scale);
        return TensorT(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

    int64_t dim(int i) const {
        int nd = ndim();
        if (i < 0) i += nd;
        return node_->shape[i];
    }

    const std::vector<S>& data() const { return node_->value; }

    // Leaf tensors only (parameters owned by a trainer); op outputs are immutable.
    std::vector<S>& mutable_data() {
        if (!node_->is_leaf()) throw TensorError("mutable_data: tensor is not a leaf");
        return node_->value;
    }

    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<S>& grad() const {
        if (node_->grad.empty()) throw TensorError("grad: no gradient present");
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    S item() const {
        if (numel() != 1) throw TensorError("item: tensor has shape " + shape_str(shape()));
        return node_->value[0];
    }

    // Deep copy of the value buffer as a fresh leaf.
    TensorT clone() const {
        auto n = std::make_shared<detail::NodeT<S>>();
        n->shape = node_->shape;
        n->value = node_->value;
        n->requires_grad = node_->requires_grad;
        return TensorT(std::move(n));
    }

    detail::NodePtr<S> node() const { return node_; }

private:
    detail::NodePtr<S> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Reverse-mode sweep from a scalar loss. Intermediate grads are reset per call,
// so leaf (parameter) grads accumulate across repeated calls as documented.
template <class S>
void backward(const TensorT<S>& loss) {
    if (!loss.defined()) throw TensorError("backward: undefined tensor");
    auto root = loss.node();
    if (numel_of(root->shape) != 1)
        throw TensorError("backward: loss must be scalar, got " + shape_str(root->shape));
    if (!root->requires_grad)
        throw TensorError("backward: loss is detached from the tape");

    // post-order DFS
    std::vector<detail::NodeT<S>*> order;
    std::unordered_set<detail::NodeT<S>*> seen;
    struct Frame {
        detail::NodeT<S>* n;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::NodeT<S>* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    for (auto* n : order)
        if (!n->is_leaf()) n->grad.assign(n->value.size(), S(0));
    root->ensure_grad()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::NodeT<S>* n = *it;
        if (n->backward) n->backward(*n);
    }
}

}  // namespace cfmsep

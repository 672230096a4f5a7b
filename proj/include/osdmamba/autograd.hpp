#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>

#include "osdmamba/tensor.hpp"

namespace osd {

struct Node;
using Var = std::shared_ptr<Node>;

// Gradients of leaf nodes (parameters, inputs), keyed by node identity.
using GradMap = std::unordered_map<const Node*, Tensor>;

// One value in the computation graph. Non-leaf nodes carry a backprop rule
// that reads this->grad and accumulates into the adjoints of the operands
// captured by the rule's closure.
struct Node {
    Tensor value;
    Tensor grad;  // adjoint buffer used during a backward pass; empty when unset
    bool requires_grad = false;
    bool leaf = false;
    int64_t tape_pos = -1;
    std::string name;  // set for named parameters
    std::function<void(Node&, GradMap&)> backprop;
};

inline void accumulate_grad(Node& target, const Tensor& g, GradMap& leaf_grads) {
    if (target.leaf) {
        auto [it, inserted] = leaf_grads.try_emplace(&target, Tensor());
        if (inserted) it->second = Tensor(target.value.shape());
        it->second.add_(g);
    } else {
        if (target.grad.empty()) target.grad = Tensor(target.value.shape());
        target.grad.add_(g);
    }
}

// Ordered record of primitive applications. Operands of any entry were
// produced by strictly earlier entries or are leaves, so one reverse sweep
// propagates all adjoints.
class Tape {
public:
    void record(const Var& v) {
        v->tape_pos = static_cast<int64_t>(entries_.size());
        entries_.push_back(v);
    }

    size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    // Accumulates leaf gradients into `leaf_grads` (so repeated calls sum).
    void backward(const Var& output, GradMap& leaf_grads) {
        if (output->value.numel() != 1)
            throw ContractError("backward requires a scalar output, got shape " + shape_str(output->value.shape()));
        if (output->tape_pos < 0) {
            // output is a leaf or constant: gradient w.r.t. itself only
            if (output->leaf && output->requires_grad) accumulate_grad(*output, Tensor::ones(output->value.shape()), leaf_grads);
            return;
        }
        for (auto& n : entries_) n->grad = Tensor();
        output->grad = Tensor::ones(output->value.shape());
        for (int64_t i = output->tape_pos; i >= 0; --i) {
            Node& n = *entries_[static_cast<size_t>(i)];
            if (!n.requires_grad || n.grad.empty() || !n.backprop) continue;
            n.backprop(n, leaf_grads);
        }
    }

    GradMap backward(const Var& output) {
        GradMap g;
        backward(output, g);
        return g;
    }

private:
    std::vector<Var> entries_;
};

namespace detail {
inline Tape*& active_tape_slot() {
    thread_local Tape* t = nullptr;
    return t;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

// Activates a tape for the current thread; ops record onto it while in scope.
class TapeScope {
public:
    explicit TapeScope(Tape& t) : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = &t; }
    ~TapeScope() { detail::active_tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

inline Var make_leaf(Tensor value, bool requires_grad, std::string name = {}) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->leaf = true;
    n->name = std::move(name);
    return n;
}

inline Var make_constant(Tensor value) { return make_leaf(std::move(value), false); }

// Creates an op result node. Records on the active tape only when some
// operand needs gradients; otherwise the backprop rule is dropped and the
// node is a plain value.
inline Var make_op(Tensor value, bool any_input_grad, std::function<void(Node&, GradMap&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    Tape* tape = active_tape();
    if (tape != nullptr && any_input_grad) {
        n->requires_grad = true;
        n->backprop = std::move(backprop);
        tape->record(n);
    }
    return n;
}

inline bool wants_grad(const Var& v) { return v && v->requires_grad; }

}  // namespace osd

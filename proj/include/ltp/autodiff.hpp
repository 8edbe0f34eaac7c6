#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "ltp/tensor.hpp"

namespace ltp {

// Trainable tensor with its gradient and optimizer momentum buffer.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor vel;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)),
          grad(Tensor::zeros(value.shape())), vel(Tensor::zeros(value.shape())) {}

    void zero_grad() {
        for (int64_t i = 0; i < grad.numel(); ++i) grad[i] = 0.0;
    }
};

class Tape;

struct Node {
    Tensor owned;
    const Tensor* external = nullptr;  // leaf aliasing a Parameter's value
    Tensor grad;                       // allocated on first contribution
    bool needs_grad = false;
    std::function<void(Node&)> backward;

    const Tensor& val() const { return external ? *external : owned; }
};

// Handle into a Tape. Cheap to copy; lifetime bound to the tape.
struct Var {
    Node* node = nullptr;
    Tape* tape = nullptr;

    bool defined() const { return node != nullptr; }
    const Tensor& val() const { return node->val(); }
    const std::vector<int>& shape() const { return val().shape(); }

    // gradient after Tape::backward(); zeros if no path reached this node
    Tensor grad() const {
        if (!node->grad.empty()) return node->grad;
        return Tensor::zeros(val().shape());
    }
};

// Reverse-mode tape. Nodes are created in topological order by construction;
// backward() replays the recorded closures in reverse. One tape per training
// item; parameter gradients are accumulated out via export_grads so
// independently built tapes can be reduced in a fixed order.
class Tape {
public:
    Var param(Parameter& p) {
        Node& n = push();
        n.external = &p.value;
        if (!frozen_) {
            n.needs_grad = true;
            leaves_.emplace_back(&p, &n);
        }
        return {&n, this};
    }

    // While frozen, param() produces untracked leaves: the momentum branch
    // contributes values but never gradients.
    void set_frozen(bool frozen) { frozen_ = frozen; }
    bool frozen() const { return frozen_; }

    Var constant(Tensor t) {
        Node& n = push();
        n.owned = std::move(t);
        return {&n, this};
    }

    // tracked leaf that is not a Parameter (finite-difference probes)
    Var input(Tensor t) {
        Node& n = push();
        n.owned = std::move(t);
        n.needs_grad = true;
        return {&n, this};
    }

    Var make(Tensor value, bool needs_grad, std::function<void(Node&)> bw) {
        Node& n = push();
        n.owned = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) n.backward = std::move(bw);
        return {&n, this};
    }

    void backward(Var loss) {
        if (loss.tape != this) throw ContractError("backward on a foreign tape");
        if (loss.val().numel() != 1) throw ContractError("backward requires a scalar loss");
        loss.node->grad = Tensor::full(loss.val().shape(), 1.0);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->backward && !it->grad.empty()) it->backward(*it);
        }
    }

    // Add every parameter-leaf gradient into its Parameter::grad, scaled.
    void export_grads(double scale = 1.0) {
        for (auto& [p, n] : leaves_) {
            if (n->grad.empty()) continue;
            for (int64_t i = 0; i < n->grad.numel(); ++i) p->grad[i] += scale * n->grad[i];
        }
    }

    static void accumulate(Node* n, const Tensor& g) {
        if (!n->needs_grad) return;
        if (n->grad.empty()) n->grad = Tensor::zeros(n->val().shape());
        for (int64_t i = 0; i < g.numel(); ++i) n->grad[i] += g[i];
    }

    size_t size() const { return nodes_.size(); }

private:
    Node& push() { return nodes_.emplace_back(); }

    std::deque<Node> nodes_;
    std::vector<std::pair<Parameter*, Node*>> leaves_;
    bool frozen_ = false;
};

struct FrozenGuard {
    Tape& tape;
    bool prev;
    explicit FrozenGuard(Tape& t) : tape(t), prev(t.frozen()) { t.set_frozen(true); }
    ~FrozenGuard() { tape.set_frozen(prev); }
};

// --- elementwise / scalar ---
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var relu(Var a);
Var exp_of(Var a);
Var log_of(Var a);
Var stop_grad(Var a);
Var mask_mul(Var a, const Tensor& mask);

// --- shape / stacking ---
Var reshape(Var a, std::vector<int> shape);
Var stack_rows(Tape& tape, std::span<const Var> rows);

// --- matrix ---
// Y = X * W^T + b, X:{n,Din}, W:{Dout,Din}, b:{1,Dout}
Var linear(Var x, Var w, Var b);
// A * B^T with constant B:{m,d} -> {n,m}
Var matmul_nt_const(Var a, const Tensor& b);
Var row_dot(Var a, Var b);
Var row_dot_const(Var a, const Tensor& b);
Var sum_rows(Var a);                       // {n,k} -> {n,1}
Var sub_colvec(Var x, Var c);              // broadcast {n,1} over {n,k}
Var sub_colvec_const(Var x, const Tensor& c);
Var mean_all(Var a);
Var sum_all(Var a);

// --- normalization ---
Var feature_norm(Var x, Var gamma, Var beta, double eps = 1e-5);  // per-row
Var l2_normalize_rows(Var x, double eps = 1e-12);

// --- conv ---
Var conv2d(Var x, Var w, Var b, int stride, int pad);
Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad);

// --- pooling ---
Var global_avg_pool(Var x);  // {C,H,W} -> {1,C}
// Average-pool a feature-space rectangle into pool x pool bins with
// integer-snapped bin edges; returns the flattened {1, C*pool*pool} feature.
Var roi_avg_pool(Var x, double fx0, double fy0, double fx1, double fy1, int pool);

// --- loss kernels ---
Var smooth_l1_mean(Var x);                                   // target 0
Var bce_logits_sum(Var logits, const Tensor& targets);       // {n,1} -> {1,1}
Var softmax_ce_mean(Var logits, const std::vector<int>& labels);

}  // namespace ltp

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "atlasgen/tensor.hpp"

namespace atlasgen {
namespace ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad; // allocated lazily; same shape as value
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.shape != value.shape) grad = Tensor::zeros(value.shape);
    }
    void accumulate(const Tensor& g) {
        ensure_grad();
        const real* s = g.ptr();
        real* d = grad.ptr();
        const int64_t n = grad.numel();
        for (int64_t i = 0; i < n; ++i) d[i] += s[i];
    }
};

// Lightweight handle; ops take and return Vars by value.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : node_(std::move(n)) {}

    bool defined() const { return node_ != nullptr; }
    Node* node() const { return node_.get(); }
    const NodePtr& node_ptr() const { return node_; }

    const Tensor& value() const { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& mutable_value() { return node_->value; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    real item() const { return node_->value.item(); }
    const std::vector<int>& shape() const { return node_->value.shape; }

private:
    NodePtr node_;
};

// Graph recording toggle (inference paths skip tape construction entirely).
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    bool prev_;
};

Var constant(Tensor t);
Var parameter(Tensor t);
Var detach(const Var& v);

// Core op constructor: value computed eagerly, backward recorded only when
// grad mode is on and some parent requires grad.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Runs reverse-mode accumulation from a scalar loss.
void backward(const Var& loss);

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div_(const Var& a, const Var& b);
Var add_scalar(const Var& a, real s);
Var mul_scalar(const Var& a, real s);
Var neg(const Var& a);
Var abs_(const Var& a);
Var square(const Var& a);
Var sqrt_(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var sigmoid(const Var& a);
Var leaky_relu(const Var& a, real slope);
Var relu(const Var& a);

// ---- reductions / structure ----
Var sum(const Var& a);  // -> [1]
Var mean(const Var& a); // -> [1]
Var reshape(const Var& a, std::vector<int> shape);
Var concat_channels(const Var& a, const Var& b); // [N,Ca,D,H,W] + [N,Cb,...]
Var slice_channel(const Var& x, int c);          // [N,C,D,H,W] -> [N,1,D,H,W]

// ---- small dense algebra ----
Var linear(const Var& x, const Var& w, const Var& b); // x[N,K] w[O,K] b[O] (b may be undefined)
Var rows_dot(const Var& a, const Var& b);             // [N,K]x[N,K] -> [N]
Var log_sum_exp_rows(const Var& x);                   // [N,M] -> [N]
Var concat_cols(const Var& a, const Var& b);          // [N,A] + [N,B] -> [N,A+B]
Var slice_cols(const Var& x, int start, int len);     // [N,M] -> [N,len]
Var l2_normalize_rows(const Var& x, real eps = 1e-12);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

} // namespace ad
} // namespace atlasgen

#include "atlasgen/autodiff.hpp"

#include <algorithm>
#include <unordered_set>

namespace atlasgen {
namespace ad {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = false;
    return Var(n);
}

Var parameter(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    return Var(n);
}

Var detach(const Var& v) { return constant(v.value()); }

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg && g_grad_enabled;
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node_ptr());
        n->backward_fn = std::move(backward_fn);
    }
    return Var(n);
}

void backward(const Var& loss) {
    check(loss.defined() && loss.value().numel() == 1, "backward() needs a scalar loss");
    // Post-order DFS; reversed post-order visits each node before its parents.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad.data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

namespace {

template <typename FwdFn, typename BwdFn>
Var unary_op(const Var& a, FwdFn fwd, BwdFn bwd_factor_from_xy) {
    Tensor out(a.shape());
    const real* x = a.value().ptr();
    real* y = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
    Var av = a;
    return make_op(std::move(out), {a}, [av, bwd_factor_from_xy](Node& self) {
        Node* pa = av.node();
        pa->ensure_grad();
        const real* g = self.grad.ptr();
        const real* x = pa->value.ptr();
        const real* y = self.value.ptr();
        real* gx = pa->grad.ptr();
        const int64_t n = self.value.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * bwd_factor_from_xy(x[i], y[i]);
    });
}

} // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out(a.shape());
    const real* xa = a.value().ptr();
    const real* xb = b.value().ptr();
    real* y = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = xa[i] + xb[i];
    Var av = a, bv = b;
    return make_op(std::move(out), {a, b}, [av, bv](Node& self) {
        if (av.requires_grad()) av.node()->accumulate(self.grad);
        if (bv.requires_grad()) bv.node()->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out(a.shape());
    const real* xa = a.value().ptr();
    const real* xb = b.value().ptr();
    real* y = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = xa[i] - xb[i];
    Var av = a, bv = b;
    return make_op(std::move(out), {a, b}, [av, bv](Node& self) {
        if (av.requires_grad()) av.node()->accumulate(self.grad);
        if (bv.requires_grad()) {
            Node* pb = bv.node();
            pb->ensure_grad();
            const real* g = self.grad.ptr();
            real* gb = pb->grad.ptr();
            const int64_t n = self.grad.numel();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out(a.shape());
    const real* xa = a.value().ptr();
    const real* xb = b.value().ptr();
    real* y = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = xa[i] * xb[i];
    Var av = a, bv = b;
    return make_op(std::move(out), {a, b}, [av, bv](Node& self) {
        const real* g = self.grad.ptr();
        const int64_t n = self.grad.numel();
        if (av.requires_grad()) {
            Node* pa = av.node();
            pa->ensure_grad();
            real* ga = pa->grad.ptr();
            const real* xb = bv.value().ptr();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * xb[i];
        }
        if (bv.requires_grad()) {
            Node* pb = bv.node();
            pb->ensure_grad();
            real* gb = pb->grad.ptr();
            const real* xa = av.value().ptr();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * xa[i];
        }
    });
}

Var div_(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "div");
    Tensor out(a.shape());
    const real* xa = a.value().ptr();
    const real* xb = b.value().ptr();
    real* y = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = xa[i] / xb[i];
    Var av = a, bv = b;
    return make_op(std::move(out), {a, b}, [av, bv](Node& self) {
        const real* g = self.grad.ptr();
        const real* xb = bv.value().ptr();
        const int64_t n = self.grad.numel();
        if (av.requires_grad()) {
            Node* pa = av.node();
            pa->ensure_grad();
            real* ga = pa->grad.ptr();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] / xb[i];
        }
        if (bv.requires_grad()) {
            Node* pb = bv.node();
            pb->ensure_grad();
            real* gb = pb->grad.ptr();
            const real* y = self.value.ptr();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g[i] * y[i] / xb[i];
        }
    });
}

Var add_scalar(const Var& a, real s) {
    return unary_op(
        a, [s](real x) { return x + s; }, [](real, real) { return 1.0; });
}

Var mul_scalar(const Var& a, real s) {
    return unary_op(
        a, [s](real x) { return x * s; }, [s](real, real) { return s; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var abs_(const Var& a) {
    // Subgradient 0 at the kink.
    return unary_op(
        a, [](real x) { return std::fabs(x); },
        [](real x, real) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
    return unary_op(
        a, [](real x) { return x * x; }, [](real x, real) { return 2.0 * x; });
}

Var sqrt_(const Var& a) {
    return unary_op(
        a, [](real x) { return std::sqrt(x); }, [](real, real y) { return 0.5 / y; });
}

Var exp_(const Var& a) {
    return unary_op(
        a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

Var log_(const Var& a) {
    return unary_op(
        a, [](real x) { return std::log(x); }, [](real x, real) { return 1.0 / x; });
}

Var sigmoid(const Var& a) {
    return unary_op(
        a,
        [](real x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](real, real y) { return y * (1.0 - y); });
}

Var leaky_relu(const Var& a, real slope) {
    return unary_op(
        a, [slope](real x) { return x >= 0 ? x : slope * x; },
        [slope](real x, real) { return x >= 0 ? 1.0 : slope; });
}

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

// ---------------------------------------------------------------- reductions

Var sum(const Var& a) {
    real s = 0.0;
    for (real v : a.value().data) s += v;
    Var av = a;
    return make_op(Tensor::scalar(s), {a}, [av](Node& self) {
        Node* pa = av.node();
        pa->ensure_grad();
        const real g = self.grad.data[0];
        real* gx = pa->grad.ptr();
        const int64_t n = pa->value.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
}

Var mean(const Var& a) {
    const real inv = 1.0 / static_cast<real>(a.value().numel());
    real s = 0.0;
    for (real v : a.value().data) s += v;
    Var av = a;
    return make_op(Tensor::scalar(s * inv), {a}, [av, inv](Node& self) {
        Node* pa = av.node();
        pa->ensure_grad();
        const real g = self.grad.data[0] * inv;
        real* gx = pa->grad.ptr();
        const int64_t n = pa->value.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
}

Var reshape(const Var& a, std::vector<int> shape) {
    check(numel_of(shape) == a.value().numel(),
          "reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Tensor out(shape, a.value().data);
    Var av = a;
    return make_op(std::move(out), {a}, [av](Node& self) {
        Node* pa = av.node();
        pa->ensure_grad();
        const real* g = self.grad.ptr();
        real* gx = pa->grad.ptr();
        const int64_t n = self.grad.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    check(sa.size() == 5 && sb.size() == 5, "concat_channels expects [N,C,D,H,W]");
    check(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3] && sa[4] == sb[4],
          "concat_channels: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
    const int N = sa[0], Ca = sa[1], Cb = sb[1];
    const int64_t spatial = static_cast<int64_t>(sa[2]) * sa[3] * sa[4];
    Tensor out({N, Ca + Cb, sa[2], sa[3], sa[4]});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.value().ptr() + n * Ca * spatial, Ca * spatial,
                    out.ptr() + n * (Ca + Cb) * spatial);
        std::copy_n(b.value().ptr() + n * Cb * spatial, Cb * spatial,
                    out.ptr() + (n * (Ca + Cb) + Ca) * spatial);
    }
    Var av = a, bv = b;
    return make_op(std::move(out), {a, b}, [av, bv, N, Ca, Cb, spatial](Node& self) {
        const real* g = self.grad.ptr();
        if (av.requires_grad()) {
            Node* pa = av.node();
            pa->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const real* gs = g + n * (Ca + Cb) * spatial;
                real* gd = pa->grad.ptr() + n * Ca * spatial;
                for (int64_t i = 0; i < Ca * spatial; ++i) gd[i] += gs[i];
            }
        }
        if (bv.requires_grad()) {
            Node* pb = bv.node();
            pb->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const real* gs = g + (n * (Ca + Cb) + Ca) * spatial;
                real* gd = pb->grad.ptr() + n * Cb * spatial;
                for (int64_t i = 0; i < Cb * spatial; ++i) gd[i] += gs[i];
            }
        }
    });
}

Var slice_channel(const Var& x, int c) {
    const auto& s = x.shape();
    check(s.size() == 5, "slice_channel expects [N,C,D,H,W]");
    check(c >= 0 && c < s[1], "slice_channel: channel out of range");
    const int N = s[0], C = s[1];
    const int64_t spatial = static_cast<int64_t>(s[2]) * s[3] * s[4];
    Tensor out({N, 1, s[2], s[3], s[4]});
    for (int n = 0; n < N; ++n)
        std::copy_n(x.value().ptr() + (static_cast<int64_t>(n) * C + c) * spatial, spatial,
                    out.ptr() + n * spatial);
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, c, N, C, spatial](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const real* g = self.grad.ptr();
        for (int n = 0; n < N; ++n) {
            real* gd = px->grad.ptr() + (static_cast<int64_t>(n) * C + c) * spatial;
            const real* gs = g + n * spatial;
            for (int64_t i = 0; i < spatial; ++i) gd[i] += gs[i];
        }
    });
}

// ---------------------------------------------------------------- dense

Var linear(const Var& x, const Var& w, const Var& b) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    check(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[1],
          "linear: want x[N,K], w[O,K]; got " + shape_str(sx) + ", " + shape_str(sw));
    const int N = sx[0], K = sx[1], O = sw[0];
    if (b.defined()) check(b.shape() == std::vector<int>{O}, "linear: bias must be [O]");
    Tensor out({N, O});
    const real* xp = x.value().ptr();
    const real* wp = w.value().ptr();
    for (int n = 0; n < N; ++n) {
        real* yo = out.ptr() + static_cast<int64_t>(n) * O;
        const real* xn = xp + static_cast<int64_t>(n) * K;
        for (int o = 0; o < O; ++o) {
            const real* wo = wp + static_cast<int64_t>(o) * K;
            real acc = b.defined() ? b.value().data[o] : 0.0;
            for (int k = 0; k < K; ++k) acc += xn[k] * wo[k];
            yo[o] = acc;
        }
    }
    Var xv = x, wv = w, bv = b;
    std::vector<Var> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    return make_op(std::move(out), std::move(parents), [xv, wv, bv, N, K, O](Node& self) {
        const real* g = self.grad.ptr();
        if (xv.requires_grad()) {
            Node* px = xv.node();
            px->ensure_grad();
            const real* wp = wv.value().ptr();
            for (int n = 0; n < N; ++n) {
                real* gx = px->grad.ptr() + static_cast<int64_t>(n) * K;
                const real* gn = g + static_cast<int64_t>(n) * O;
                for (int o = 0; o < O; ++o) {
                    const real go = gn[o];
                    const real* wo = wp + static_cast<int64_t>(o) * K;
                    for (int k = 0; k < K; ++k) gx[k] += go * wo[k];
                }
            }
        }
        if (wv.requires_grad()) {
            Node* pw = wv.node();
            pw->ensure_grad();
            const real* xp = xv.value().ptr();
            for (int n = 0; n < N; ++n) {
                const real* gn = g + static_cast<int64_t>(n) * O;
                const real* xn = xp + static_cast<int64_t>(n) * K;
                for (int o = 0; o < O; ++o) {
                    const real go = gn[o];
                    real* gw = pw->grad.ptr() + static_cast<int64_t>(o) * K;
                    for (int k = 0; k < K; ++k) gw[k] += go * xn[k];
                }
            }
        }
        if (bv.defined() && bv.requires_grad()) {
            Node* pb = bv.node();
            pb->ensure_grad();
            real* gb = pb->grad.ptr();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) gb[o] += g[static_cast<int64_t>(n) * O + o];
        }
    });
}

Var rows_dot(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "rows_dot");
    check(a.shape().size() == 2, "rows_dot expects [N,K]");
    const int N = a.shape()[0], K = a.shape()[1];
    Tensor out({N});
    for (int n = 0; n < N; ++n) {
        real acc = 0.0;
        const real* xa = a.value().ptr() + static_cast<int64_t>(n) * K;
        const real* xb = b.value().ptr() + static_cast<int64_t>(n) * K;
        for (int k = 0; k < K; ++k) acc += xa[k] * xb[k];
        out.data[n] = acc;
    }
    Var av = a, bv = b;
    return make_op(std::move(out), {a, b}, [av, bv, N, K](Node& self) {
        const real* g = self.grad.ptr();
        if (av.requires_grad()) {
            Node* pa = av.node();
            pa->ensure_grad();
            const real* xb = bv.value().ptr();
            for (int n = 0; n < N; ++n)
                for (int k = 0; k < K; ++k)
                    pa->grad.data[static_cast<size_t>(n) * K + k] += g[n] * xb[static_cast<size_t>(n) * K + k];
        }
        if (bv.requires_grad()) {
            Node* pb = bv.node();
            pb->ensure_grad();
            const real* xa = av.value().ptr();
            for (int n = 0; n < N; ++n)
                for (int k = 0; k < K; ++k)
                    pb->grad.data[static_cast<size_t>(n) * K + k] += g[n] * xa[static_cast<size_t>(n) * K + k];
        }
    });
}

Var concat_cols(const Var& a, const Var& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    check(sa.size() == 2 && sb.size() == 2 && sa[0] == sb[0],
          "concat_cols: want [N,A],[N,B]; got " + shape_str(sa) + ", " + shape_str(sb));
    const int N = sa[0], A = sa[1], B = sb[1];
    Tensor out({N, A + B});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.value().ptr() + static_cast<int64_t>(n) * A, A,
                    out.ptr() + static_cast<int64_t>(n) * (A + B));
        std::copy_n(b.value().ptr() + static_cast<int64_t>(n) * B, B,
                    out.ptr() + static_cast<int64_t>(n) * (A + B) + A);
    }
    Var av = a, bv = b;
    return make_op(std::move(out), {a, b}, [av, bv, N, A, B](Node& self) {
        const real* g = self.grad.ptr();
        if (av.requires_grad()) {
            av.node()->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < A; ++i)
                    av.node()->grad.data[static_cast<size_t>(n) * A + i] +=
                        g[static_cast<int64_t>(n) * (A + B) + i];
        }
        if (bv.requires_grad()) {
            bv.node()->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < B; ++i)
                    bv.node()->grad.data[static_cast<size_t>(n) * B + i] +=
                        g[static_cast<int64_t>(n) * (A + B) + A + i];
        }
    });
}

Var slice_cols(const Var& x, int start, int len) {
    const auto& s = x.shape();
    check(s.size() == 2 && start >= 0 && len > 0 && start + len <= s[1],
          "slice_cols: bad range [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") for " + shape_str(s));
    const int N = s[0], M = s[1];
    Tensor out({N, len});
    for (int n = 0; n < N; ++n)
        std::copy_n(x.value().ptr() + static_cast<int64_t>(n) * M + start, len,
                    out.ptr() + static_cast<int64_t>(n) * len);
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, start, len, N, M](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < len; ++i)
                px->grad.data[static_cast<size_t>(n) * M + start + i] +=
                    self.grad.data[static_cast<size_t>(n) * len + i];
    });
}

Var l2_normalize_rows(const Var& x, real eps) {
    const auto& s = x.shape();
    check(s.size() == 2, "l2_normalize_rows expects [N,K]");
    const int N = s[0], K = s[1];
    Tensor out(s);
    Tensor inv_norms({N});
    for (int n = 0; n < N; ++n) {
        const real* row = x.value().ptr() + static_cast<int64_t>(n) * K;
        real ss = 0.0;
        for (int k = 0; k < K; ++k) ss += row[k] * row[k];
        const real inv = 1.0 / std::sqrt(ss + eps);
        inv_norms.data[static_cast<size_t>(n)] = inv;
        for (int k = 0; k < K; ++k) out.data[static_cast<size_t>(n) * K + k] = row[k] * inv;
    }
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, inv_norms, N, K](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const real* g = self.grad.ptr();
        const real* y = self.value.ptr();
        for (int n = 0; n < N; ++n) {
            const real inv = inv_norms.data[static_cast<size_t>(n)];
            real dot = 0.0;
            for (int k = 0; k < K; ++k)
                dot += g[static_cast<int64_t>(n) * K + k] * y[static_cast<int64_t>(n) * K + k];
            for (int k = 0; k < K; ++k)
                px->grad.data[static_cast<size_t>(n) * K + k] +=
                    inv * (g[static_cast<int64_t>(n) * K + k] - dot * y[static_cast<int64_t>(n) * K + k]);
        }
    });
}

Var log_sum_exp_rows(const Var& x) {
    check(x.shape().size() == 2, "log_sum_exp_rows expects [N,M]");
    const int N = x.shape()[0], M = x.shape()[1];
    Tensor out({N});
    const real* xp = x.value().ptr();
    for (int n = 0; n < N; ++n) {
        const real* row = xp + static_cast<int64_t>(n) * M;
        real mx = row[0];
        for (int m = 1; m < M; ++m) mx = std::max(mx, row[m]);
        real s = 0.0;
        for (int m = 0; m < M; ++m) s += std::exp(row[m] - mx);
        out.data[n] = mx + std::log(s);
    }
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, N, M](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const real* g = self.grad.ptr();
        const real* xp = px->value.ptr();
        const real* y = self.value.ptr();
        for (int n = 0; n < N; ++n) {
            const real* row = xp + static_cast<int64_t>(n) * M;
            real* gx = px->grad.ptr() + static_cast<int64_t>(n) * M;
            for (int m = 0; m < M; ++m) gx[m] += g[n] * std::exp(row[m] - y[n]);
        }
    });
}

} // namespace ad
} // namespace atlasgen

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "atlasgen/errors.hpp"

namespace atlasgen {

// All numeric work runs in double precision; the gradient-check suite
// compares analytic and finite-difference derivatives at 1e-3 relative
// tolerance, which single precision cannot honor.
using real = double;

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor (last dimension contiguous).
struct Tensor {
    std::vector<int> shape;
    std::vector<real> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        for (int d : shape) check(d > 0, "Tensor dims must be positive, got " + shape_str(shape));
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }
    Tensor(std::vector<int> s, real fill) : Tensor(std::move(s)) {
        for (auto& v : data) v = fill;
    }
    Tensor(std::vector<int> s, std::vector<real> d) : shape(std::move(s)), data(std::move(d)) {
        check(static_cast<int64_t>(data.size()) == numel_of(shape),
              "Tensor data size does not match shape " + shape_str(shape));
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, real v) { return Tensor(std::move(s), v); }
    static Tensor scalar(real v) { return Tensor({1}, std::vector<real>{v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    real* ptr() { return data.data(); }
    const real* ptr() const { return data.data(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    real item() const {
        check(numel() == 1, "item() on non-scalar tensor " + shape_str(shape));
        return data[0];
    }

    bool all_finite() const {
        for (real v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    real min() const {
        real m = data.empty() ? 0.0 : data[0];
        for (real v : data) m = std::min(m, v);
        return m;
    }
    real max() const {
        real m = data.empty() ? 0.0 : data[0];
        for (real v : data) m = std::max(m, v);
        return m;
    }
    real mean() const {
        if (data.empty()) return 0.0;
        real s = 0.0;
        for (real v : data) s += v;
        return s / static_cast<real>(data.size());
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

} // namespace atlasgen

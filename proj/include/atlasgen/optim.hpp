#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "atlasgen/autodiff.hpp"

namespace atlasgen {
namespace ad {

struct AdamConfig {
    real lr = 2e-4;
    real beta1 = 0.9;
    real beta2 = 0.999;
    real eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto& p : params_) {
            m_.push_back(Tensor::zeros(p.value().shape));
            v_.push_back(Tensor::zeros(p.value().shape));
        }
    }

    const AdamConfig& config() const { return cfg_; }
    void set_lr(real lr) { cfg_.lr = lr; }

    void zero_grad() {
        for (auto& p : params_) p.node()->grad = Tensor();
    }

    real grad_global_norm() const {
        real ss = 0.0;
        for (const auto& p : params_) {
            const auto& g = p.node()->grad;
            if (g.shape != p.value().shape) continue; // never touched this step
            for (real x : g.data) ss += x * x;
        }
        return std::sqrt(ss);
    }

    void clip_global_norm(real max_norm) {
        const real n = grad_global_norm();
        if (n <= max_norm || n == 0.0) return;
        const real scale = max_norm / n;
        for (auto& p : params_) {
            auto& g = p.node()->grad;
            if (g.shape != p.value().shape) continue;
            for (auto& x : g.data) x *= scale;
        }
    }

    void step() {
        ++t_;
        const real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<real>(t_));
        const real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<real>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            const auto& g = p.node()->grad;
            if (g.shape != p.value().shape) continue;
            auto& m = m_[i];
            auto& v = v_[i];
            real* pd = p.mutable_value().ptr();
            for (int64_t j = 0; j < g.numel(); ++j) {
                const real gj = g.data[static_cast<size_t>(j)];
                m.data[static_cast<size_t>(j)] = cfg_.beta1 * m.data[static_cast<size_t>(j)] + (1 - cfg_.beta1) * gj;
                v.data[static_cast<size_t>(j)] = cfg_.beta2 * v.data[static_cast<size_t>(j)] + (1 - cfg_.beta2) * gj * gj;
                const real mh = m.data[static_cast<size_t>(j)] / bc1;
                const real vh = v.data[static_cast<size_t>(j)] / bc2;
                pd[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
    }

    // Moments + step counter, for checkpoint-resume equality.
    void save_state(const std::string& prefix, std::vector<std::pair<std::string, Tensor>>& out) const {
        Tensor tt({1});
        tt.data[0] = static_cast<real>(t_);
        out.emplace_back(prefix + ".t", tt);
        for (size_t i = 0; i < params_.size(); ++i) {
            out.emplace_back(prefix + ".m" + std::to_string(i), m_[i]);
            out.emplace_back(prefix + ".v" + std::to_string(i), v_[i]);
        }
    }
    void load_state(const std::string& prefix,
                    const std::vector<std::pair<std::string, Tensor>>& in) {
        auto find = [&](const std::string& name) -> const Tensor* {
            for (const auto& [n, t] : in)
                if (n == name) return &t;
            return nullptr;
        };
        const Tensor* tt = find(prefix + ".t");
        check(tt != nullptr, "optimizer state missing from checkpoint: " + prefix);
        t_ = static_cast<int64_t>(tt->data[0]);
        for (size_t i = 0; i < params_.size(); ++i) {
            const Tensor* m = find(prefix + ".m" + std::to_string(i));
            const Tensor* v = find(prefix + ".v" + std::to_string(i));
            check(m && v && m->shape == m_[i].shape && v->shape == v_[i].shape,
                  "optimizer state shape mismatch at " + prefix + " index " + std::to_string(i));
            m_[i] = *m;
            v_[i] = *v;
        }
    }

    size_t n_params() const { return params_.size(); }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    int64_t t_ = 0;
    AdamConfig cfg_;
};

} // namespace ad
} // namespace atlasgen

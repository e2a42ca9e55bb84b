#pragma once

// Reference implementations used as independent oracles. Everything here is a
// direct nested-loop transcription of the definitions, sharing no code with the
// library paths it checks.

#include <algorithm>
#include <cmath>
#include <vector>

#include "atlasgen/tensor.hpp"

namespace agtest {
namespace oracle {

using atlasgen::real;
using atlasgen::Tensor;

// Trilinear sample of vol [D,H,W] at clamped coordinates.
inline real sample_trilinear(const Tensor& vol, real pz, real py, real px) {
    const int D = vol.dim(0), H = vol.dim(1), W = vol.dim(2);
    pz = std::min(std::max(pz, 0.0), static_cast<real>(D - 1));
    py = std::min(std::max(py, 0.0), static_cast<real>(H - 1));
    px = std::min(std::max(px, 0.0), static_cast<real>(W - 1));
    const int z0 = std::min(static_cast<int>(std::floor(pz)), D - 1);
    const int y0 = std::min(static_cast<int>(std::floor(py)), H - 1);
    const int x0 = std::min(static_cast<int>(std::floor(px)), W - 1);
    const int z1 = std::min(z0 + 1, D - 1), y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
    const real fz = pz - z0, fy = py - y0, fx = px - x0;
    auto at = [&](int z, int y, int x) {
        return vol.data[(static_cast<size_t>(z) * H + y) * W + x];
    };
    real v = 0.0;
    v += at(z0, y0, x0) * (1 - fz) * (1 - fy) * (1 - fx);
    v += at(z0, y0, x1) * (1 - fz) * (1 - fy) * fx;
    v += at(z0, y1, x0) * (1 - fz) * fy * (1 - fx);
    v += at(z0, y1, x1) * (1 - fz) * fy * fx;
    v += at(z1, y0, x0) * fz * (1 - fy) * (1 - fx);
    v += at(z1, y0, x1) * fz * (1 - fy) * fx;
    v += at(z1, y1, x0) * fz * fy * (1 - fx);
    v += at(z1, y1, x1) * fz * fy * fx;
    return v;
}

// Per-voxel interpolation oracle for the warp: flow [3,D,H,W].
inline Tensor warp_reference(const Tensor& vol, const Tensor& flow) {
    const int D = vol.dim(0), H = vol.dim(1), W = vol.dim(2);
    const int64_t m = static_cast<int64_t>(D) * H * W;
    Tensor out(vol.shape);
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int64_t i = (static_cast<int64_t>(z) * H + y) * W + x;
                out.data[static_cast<size_t>(i)] =
                    sample_trilinear(vol, z + flow.data[static_cast<size_t>(i)],
                                     y + flow.data[static_cast<size_t>(m + i)],
                                     x + flow.data[static_cast<size_t>(2 * m + i)]);
            }
    return out;
}

// Integer index-shift oracle: out(x) = vol(clamp(x + shift)).
inline Tensor shift_reference(const Tensor& vol, int sz, int sy, int sx) {
    const int D = vol.dim(0), H = vol.dim(1), W = vol.dim(2);
    Tensor out(vol.shape);
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int zi = std::clamp(z + sz, 0, D - 1);
                const int yi = std::clamp(y + sy, 0, H - 1);
                const int xi = std::clamp(x + sx, 0, W - 1);
                out.data[(static_cast<size_t>(z) * H + y) * W + x] =
                    vol.data[(static_cast<size_t>(zi) * H + yi) * W + xi];
            }
    return out;
}

inline std::vector<real> gauss1d(int window, real sigma) {
    std::vector<real> k(static_cast<size_t>(window));
    const real c = (window - 1) / 2.0;
    real s = 0.0;
    for (int i = 0; i < window; ++i) {
        k[static_cast<size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        s += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= s;
    return k;
}

// Single-scale SSIM mean via brute sliding windows (valid positions only).
inline real ssim_mean_reference(const Tensor& u, const Tensor& v, int window, real sigma, real c1,
                                real c2) {
    const int D = u.dim(0), H = u.dim(1), W = u.dim(2);
    const auto k = gauss1d(window, sigma);
    real total = 0.0;
    int64_t count = 0;
    for (int z0 = 0; z0 + window <= D; ++z0)
        for (int y0 = 0; y0 + window <= H; ++y0)
            for (int x0 = 0; x0 + window <= W; ++x0) {
                real mu = 0, mv = 0, euu = 0, evv = 0, euv = 0;
                for (int i = 0; i < window; ++i)
                    for (int j = 0; j < window; ++j)
                        for (int l = 0; l < window; ++l) {
                            const real w = k[static_cast<size_t>(i)] * k[static_cast<size_t>(j)] *
                                           k[static_cast<size_t>(l)];
                            const real a =
                                u.data[(static_cast<size_t>(z0 + i) * H + y0 + j) * W + x0 + l];
                            const real b =
                                v.data[(static_cast<size_t>(z0 + i) * H + y0 + j) * W + x0 + l];
                            mu += w * a;
                            mv += w * b;
                            euu += w * a * a;
                            evv += w * b * b;
                            euv += w * a * b;
                        }
                const real su = euu - mu * mu;
                const real sv = evv - mv * mv;
                const real suv = euv - mu * mv;
                total += ((2 * mu * mv + c1) * (2 * suv + c2)) /
                         ((mu * mu + mv * mv + c1) * (su + sv + c2));
                ++count;
            }
    return total / static_cast<real>(count);
}

inline Tensor avg_pool2_reference(const Tensor& x) {
    const int D = x.dim(0) / 2, H = x.dim(1) / 2, W = x.dim(2) / 2;
    Tensor out({D, H, W});
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                real a = 0.0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            a += x.data[(static_cast<size_t>(2 * z + dz) * x.dim(1) + 2 * y + dy) *
                                            x.dim(2) +
                                        2 * xx + dx];
                out.data[(static_cast<size_t>(z) * H + y) * W + xx] = a / 8.0;
            }
    return out;
}

// Full MS-SSIM + L1 reference: mean L1 plus (1 - mean of per-scale SSIM means).
inline real ssim_l1_reference(Tensor u, Tensor v, int window, real sigma, int max_scales,
                              real c1 = 1e-4, real c2 = 9e-4) {
    real l1 = 0.0;
    for (int64_t i = 0; i < u.numel(); ++i)
        l1 += std::fabs(u.data[static_cast<size_t>(i)] - v.data[static_cast<size_t>(i)]);
    l1 /= static_cast<real>(u.numel());
    std::vector<real> per_scale;
    for (int s = 0; s < max_scales; ++s) {
        if (std::min({u.dim(0), u.dim(1), u.dim(2)}) < window) break;
        per_scale.push_back(ssim_mean_reference(u, v, window, sigma, c1, c2));
        u = avg_pool2_reference(u);
        v = avg_pool2_reference(v);
    }
    real ms = 0.0;
    for (real s : per_scale) ms += s;
    ms /= static_cast<real>(per_scale.size());
    return l1 + (1.0 - ms);
}

// Loop-based local-NCC loss: 1 - mean cc^2 over valid windows.
inline real ncc_reference(const Tensor& u, const Tensor& v, int window, real eps = 1e-5) {
    const int D = u.dim(0), H = u.dim(1), W = u.dim(2);
    real total = 0.0;
    int64_t count = 0;
    for (int z0 = 0; z0 + window <= D; ++z0)
        for (int y0 = 0; y0 + window <= H; ++y0)
            for (int x0 = 0; x0 + window <= W; ++x0) {
                real mu = 0, mv = 0;
                const int n = window * window * window;
                for (int i = 0; i < window; ++i)
                    for (int j = 0; j < window; ++j)
                        for (int l = 0; l < window; ++l) {
                            mu += u.data[(static_cast<size_t>(z0 + i) * H + y0 + j) * W + x0 + l];
                            mv += v.data[(static_cast<size_t>(z0 + i) * H + y0 + j) * W + x0 + l];
                        }
                mu /= n;
                mv /= n;
                real cross = 0, su = 0, sv = 0;
                for (int i = 0; i < window; ++i)
                    for (int j = 0; j < window; ++j)
                        for (int l = 0; l < window; ++l) {
                            const real a =
                                u.data[(static_cast<size_t>(z0 + i) * H + y0 + j) * W + x0 + l] - mu;
                            const real b =
                                v.data[(static_cast<size_t>(z0 + i) * H + y0 + j) * W + x0 + l] - mv;
                            cross += a * b;
                            su += a * a;
                            sv += b * b;
                        }
                total += cross * cross / (su * sv + eps);
                ++count;
            }
    return 1.0 - total / static_cast<real>(count);
}

// Loop-based mean |forward difference| over a [3,D,H,W] flow.
inline real flow_grad_reference(const Tensor& flow) {
    const int D = flow.dim(1), H = flow.dim(2), W = flow.dim(3);
    const int64_t m = static_cast<int64_t>(D) * H * W;
    real total = 0.0;
    int64_t count = 0;
    for (int c = 0; c < 3; ++c) {
        const real* f = flow.ptr() + c * m;
        auto at = [&](int z, int y, int x) {
            return f[(static_cast<int64_t>(z) * H + y) * W + x];
        };
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    if (z + 1 < D) { total += std::fabs(at(z + 1, y, x) - at(z, y, x)); ++count; }
                    if (y + 1 < H) { total += std::fabs(at(z, y + 1, x) - at(z, y, x)); ++count; }
                    if (x + 1 < W) { total += std::fabs(at(z, y, x + 1) - at(z, y, x)); ++count; }
                }
    }
    return count ? total / static_cast<real>(count) : 0.0;
}

} // namespace oracle
} // namespace agtest

#include "atlasgen/nn.hpp"

#include <algorithm>
#include <cmath>

namespace atlasgen {
namespace ad {

namespace {

struct ConvDims {
    int N, Ci, D, H, W;
    int Co, kd, kh, kw;
    int Do, Ho, Wo;
    int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    check(x.ndim() == 5, "conv3d: input must be [N,Ci,D,H,W], got " + shape_str(x.shape));
    check(w.ndim() == 5, "conv3d: weight must be [Co,Ci,kd,kh,kw], got " + shape_str(w.shape));
    check(x.dim(1) == w.dim(1), "conv3d: channel mismatch, input " + shape_str(x.shape) +
                                    " vs weight " + shape_str(w.shape));
    ConvDims d;
    d.N = x.dim(0); d.Ci = x.dim(1); d.D = x.dim(2); d.H = x.dim(3); d.W = x.dim(4);
    d.Co = w.dim(0); d.kd = w.dim(2); d.kh = w.dim(3); d.kw = w.dim(4);
    d.stride = stride; d.pad = pad;
    d.Do = (d.D + 2 * pad - d.kd) / stride + 1;
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    check(d.Do > 0 && d.Ho > 0 && d.Wo > 0,
          "conv3d: input " + shape_str(x.shape) + " too small for kernel");
    return d;
}

// Stride-1 forward kernel: accumulates one output row at a time.
void conv_fwd_s1(const ConvDims& d, const real* x, const real* w, const real* b, real* out) {
    const int64_t ich = static_cast<int64_t>(d.D) * d.H * d.W;
    const int64_t och = static_cast<int64_t>(d.Do) * d.Ho * d.Wo;
    const int kvol = d.kd * d.kh * d.kw;
    std::vector<real> acc(static_cast<size_t>(d.Wo));
    for (int n = 0; n < d.N; ++n) {
        const real* xn = x + static_cast<int64_t>(n) * d.Ci * ich;
        for (int co = 0; co < d.Co; ++co) {
            real* on = out + (static_cast<int64_t>(n) * d.Co + co) * och;
            const real* wc = w + static_cast<int64_t>(co) * d.Ci * kvol;
            const real bias = b ? b[co] : 0.0;
            for (int zo = 0; zo < d.Do; ++zo) {
                for (int yo = 0; yo < d.Ho; ++yo) {
                    std::fill(acc.begin(), acc.end(), bias);
                    for (int ci = 0; ci < d.Ci; ++ci) {
                        const real* xc = xn + static_cast<int64_t>(ci) * ich;
                        const real* wk = wc + static_cast<int64_t>(ci) * kvol;
                        for (int kz = 0; kz < d.kd; ++kz) {
                            const int zi = zo + kz - d.pad;
                            if (zi < 0 || zi >= d.D) continue;
                            for (int ky = 0; ky < d.kh; ++ky) {
                                const int yi = yo + ky - d.pad;
                                if (yi < 0 || yi >= d.H) continue;
                                const real* row = xc + (static_cast<int64_t>(zi) * d.H + yi) * d.W;
                                const real* wrow = wk + (static_cast<int64_t>(kz) * d.kh + ky) * d.kw;
                                for (int kx = 0; kx < d.kw; ++kx) {
                                    const int off = kx - d.pad;
                                    const int x0 = std::max(0, -off);
                                    const int x1 = std::min(d.Wo - 1, d.W - 1 - off);
                                    const real wv = wrow[kx];
                                    const real* rp = row + off;
                                    for (int xo = x0; xo <= x1; ++xo) acc[xo] += wv * rp[xo];
                                }
                            }
                        }
                    }
                    std::copy(acc.begin(), acc.end(),
                              on + (static_cast<int64_t>(zo) * d.Ho + yo) * d.Wo);
                }
            }
        }
    }
}

void conv_fwd_generic(const ConvDims& d, const real* x, const real* w, const real* b, real* out) {
    const int64_t ich = static_cast<int64_t>(d.D) * d.H * d.W;
    const int64_t och = static_cast<int64_t>(d.Do) * d.Ho * d.Wo;
    const int kvol = d.kd * d.kh * d.kw;
    for (int n = 0; n < d.N; ++n) {
        for (int co = 0; co < d.Co; ++co) {
            real* on = out + (static_cast<int64_t>(n) * d.Co + co) * och;
            const real bias = b ? b[co] : 0.0;
            for (int zo = 0; zo < d.Do; ++zo)
                for (int yo = 0; yo < d.Ho; ++yo)
                    for (int xo = 0; xo < d.Wo; ++xo) {
                        real acc = bias;
                        for (int ci = 0; ci < d.Ci; ++ci) {
                            const real* xc = x + (static_cast<int64_t>(n) * d.Ci + ci) * ich;
                            const real* wk =
                                w + (static_cast<int64_t>(co) * d.Ci + ci) * kvol;
                            for (int kz = 0; kz < d.kd; ++kz) {
                                const int zi = zo * d.stride + kz - d.pad;
                                if (zi < 0 || zi >= d.D) continue;
                                for (int ky = 0; ky < d.kh; ++ky) {
                                    const int yi = yo * d.stride + ky - d.pad;
                                    if (yi < 0 || yi >= d.H) continue;
                                    for (int kx = 0; kx < d.kw; ++kx) {
                                        const int xi = xo * d.stride + kx - d.pad;
                                        if (xi < 0 || xi >= d.W) continue;
                                        acc += wk[(static_cast<int64_t>(kz) * d.kh + ky) * d.kw + kx] *
                                               xc[(static_cast<int64_t>(zi) * d.H + yi) * d.W + xi];
                                    }
                                }
                            }
                        }
                        on[(static_cast<int64_t>(zo) * d.Ho + yo) * d.Wo + xo] = acc;
                    }
        }
    }
}

void conv_bwd_data_s1(const ConvDims& d, const real* w, const real* gout, real* gx) {
    const int64_t ich = static_cast<int64_t>(d.D) * d.H * d.W;
    const int64_t och = static_cast<int64_t>(d.Do) * d.Ho * d.Wo;
    const int kvol = d.kd * d.kh * d.kw;
    std::vector<real> acc(static_cast<size_t>(d.W));
    for (int n = 0; n < d.N; ++n) {
        for (int ci = 0; ci < d.Ci; ++ci) {
            real* gxc = gx + (static_cast<int64_t>(n) * d.Ci + ci) * ich;
            for (int zi = 0; zi < d.D; ++zi) {
                for (int yi = 0; yi < d.H; ++yi) {
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (int co = 0; co < d.Co; ++co) {
                        const real* gc = gout + (static_cast<int64_t>(n) * d.Co + co) * och;
                        const real* wk = w + (static_cast<int64_t>(co) * d.Ci + ci) * kvol;
                        for (int kz = 0; kz < d.kd; ++kz) {
                            const int zo = zi - kz + d.pad;
                            if (zo < 0 || zo >= d.Do) continue;
                            for (int ky = 0; ky < d.kh; ++ky) {
                                const int yo = yi - ky + d.pad;
                                if (yo < 0 || yo >= d.Ho) continue;
                                const real* grow = gc + (static_cast<int64_t>(zo) * d.Ho + yo) * d.Wo;
                                const real* wrow = wk + (static_cast<int64_t>(kz) * d.kh + ky) * d.kw;
                                for (int kx = 0; kx < d.kw; ++kx) {
                                    const int off = d.pad - kx; // xo = xi + off
                                    const int x0 = std::max(0, -off);
                                    const int x1 = std::min(d.W - 1, d.Wo - 1 - off);
                                    const real wv = wrow[kx];
                                    const real* gp = grow + off;
                                    for (int xi = x0; xi <= x1; ++xi) acc[xi] += wv * gp[xi];
                                }
                            }
                        }
                    }
                    real* dst = gxc + (static_cast<int64_t>(zi) * d.H + yi) * d.W;
                    for (int xi = 0; xi < d.W; ++xi) dst[xi] += acc[xi];
                }
            }
        }
    }
}

void conv_bwd_data_generic(const ConvDims& d, const real* w, const real* gout, real* gx) {
    const int64_t ich = static_cast<int64_t>(d.D) * d.H * d.W;
    const int64_t och = static_cast<int64_t>(d.Do) * d.Ho * d.Wo;
    const int kvol = d.kd * d.kh * d.kw;
    for (int n = 0; n < d.N; ++n)
        for (int co = 0; co < d.Co; ++co) {
            const real* gc = gout + (static_cast<int64_t>(n) * d.Co + co) * och;
            for (int zo = 0; zo < d.Do; ++zo)
                for (int yo = 0; yo < d.Ho; ++yo)
                    for (int xo = 0; xo < d.Wo; ++xo) {
                        const real g = gc[(static_cast<int64_t>(zo) * d.Ho + yo) * d.Wo + xo];
                        if (g == 0.0) continue;
                        for (int ci = 0; ci < d.Ci; ++ci) {
                            real* gxc = gx + (static_cast<int64_t>(n) * d.Ci + ci) * ich;
                            const real* wk = w + (static_cast<int64_t>(co) * d.Ci + ci) * kvol;
                            for (int kz = 0; kz < d.kd; ++kz) {
                                const int zi = zo * d.stride + kz - d.pad;
                                if (zi < 0 || zi >= d.D) continue;
                                for (int ky = 0; ky < d.kh; ++ky) {
                                    const int yi = yo * d.stride + ky - d.pad;
                                    if (yi < 0 || yi >= d.H) continue;
                                    for (int kx = 0; kx < d.kw; ++kx) {
                                        const int xi = xo * d.stride + kx - d.pad;
                                        if (xi < 0 || xi >= d.W) continue;
                                        gxc[(static_cast<int64_t>(zi) * d.H + yi) * d.W + xi] +=
                                            g * wk[(static_cast<int64_t>(kz) * d.kh + ky) * d.kw + kx];
                                    }
                                }
                            }
                        }
                    }
        }
}

void conv_bwd_weight(const ConvDims& d, const real* x, const real* gout, real* gw, real* gb) {
    const int64_t ich = static_cast<int64_t>(d.D) * d.H * d.W;
    const int64_t och = static_cast<int64_t>(d.Do) * d.Ho * d.Wo;
    const int kvol = d.kd * d.kh * d.kw;
    for (int n = 0; n < d.N; ++n) {
        for (int co = 0; co < d.Co; ++co) {
            const real* gc = gout + (static_cast<int64_t>(n) * d.Co + co) * och;
            if (gb) {
                real s = 0.0;
                for (int64_t i = 0; i < och; ++i) s += gc[i];
                gb[co] += s;
            }
            for (int ci = 0; ci < d.Ci; ++ci) {
                const real* xc = x + (static_cast<int64_t>(n) * d.Ci + ci) * ich;
                real* gwk = gw + (static_cast<int64_t>(co) * d.Ci + ci) * kvol;
                for (int kz = 0; kz < d.kd; ++kz)
                    for (int ky = 0; ky < d.kh; ++ky)
                        for (int kx = 0; kx < d.kw; ++kx) {
                            real acc = 0.0;
                            if (d.stride == 1) {
                                const int zoff = kz - d.pad, yoff = ky - d.pad, xoff = kx - d.pad;
                                const int z0 = std::max(0, -zoff), z1 = std::min(d.Do - 1, d.D - 1 - zoff);
                                const int y0 = std::max(0, -yoff), y1 = std::min(d.Ho - 1, d.H - 1 - yoff);
                                const int x0 = std::max(0, -xoff), x1 = std::min(d.Wo - 1, d.W - 1 - xoff);
                                for (int zo = z0; zo <= z1; ++zo)
                                    for (int yo = y0; yo <= y1; ++yo) {
                                        const real* grow =
                                            gc + (static_cast<int64_t>(zo) * d.Ho + yo) * d.Wo;
                                        const real* row = xc +
                                            (static_cast<int64_t>(zo + zoff) * d.H + yo + yoff) * d.W +
                                            xoff;
                                        for (int xo = x0; xo <= x1; ++xo) acc += grow[xo] * row[xo];
                                    }
                            } else {
                                for (int zo = 0; zo < d.Do; ++zo) {
                                    const int zi = zo * d.stride + kz - d.pad;
                                    if (zi < 0 || zi >= d.D) continue;
                                    for (int yo = 0; yo < d.Ho; ++yo) {
                                        const int yi = yo * d.stride + ky - d.pad;
                                        if (yi < 0 || yi >= d.H) continue;
                                        for (int xo = 0; xo < d.Wo; ++xo) {
                                            const int xi = xo * d.stride + kx - d.pad;
                                            if (xi < 0 || xi >= d.W) continue;
                                            acc += gc[(static_cast<int64_t>(zo) * d.Ho + yo) * d.Wo + xo] *
                                                   xc[(static_cast<int64_t>(zi) * d.H + yi) * d.W + xi];
                                        }
                                    }
                                }
                            }
                            gwk[(static_cast<int64_t>(kz) * d.kh + ky) * d.kw + kx] += acc;
                        }
            }
        }
    }
}

} // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const ConvDims d = conv_dims(x.value(), w.value(), stride, pad);
    if (b.defined())
        check(b.value().shape == std::vector<int>{d.Co}, "conv3d: bias must be [Co]");
    Tensor out({d.N, d.Co, d.Do, d.Ho, d.Wo});
    const real* bp = b.defined() ? b.value().ptr() : nullptr;
    if (stride == 1)
        conv_fwd_s1(d, x.value().ptr(), w.value().ptr(), bp, out.ptr());
    else
        conv_fwd_generic(d, x.value().ptr(), w.value().ptr(), bp, out.ptr());

    Var xv = x, wv = w, bv = b;
    std::vector<Var> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    return make_op(std::move(out), std::move(parents), [xv, wv, bv, d](Node& self) {
        const real* g = self.grad.ptr();
        if (xv.requires_grad()) {
            Node* px = xv.node();
            px->ensure_grad();
            if (d.stride == 1)
                conv_bwd_data_s1(d, wv.value().ptr(), g, px->grad.ptr());
            else
                conv_bwd_data_generic(d, wv.value().ptr(), g, px->grad.ptr());
        }
        if (wv.requires_grad() || (bv.defined() && bv.requires_grad())) {
            Node* pw = wv.node();
            pw->ensure_grad();
            real* gb = nullptr;
            if (bv.defined() && bv.requires_grad()) {
                bv.node()->ensure_grad();
                gb = bv.node()->grad.ptr();
            }
            conv_bwd_weight(d, xv.value().ptr(), g, pw->grad.ptr(), gb);
        }
    });
}

// ------------------------------------------------------------- normalization

namespace {

void norm_stats(const real* x, int64_t m, real eps, real& mean, real& inv_std) {
    real s = 0.0;
    for (int64_t i = 0; i < m; ++i) s += x[i];
    mean = s / static_cast<real>(m);
    real v = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        const real d = x[i] - mean;
        v += d * d;
    }
    inv_std = 1.0 / std::sqrt(v / static_cast<real>(m) + eps);
}

} // namespace

Var instance_norm(const Var& x, real eps) {
    const auto& s = x.shape();
    check(s.size() == 5, "instance_norm expects [N,C,D,H,W]");
    const int N = s[0], C = s[1];
    const int64_t m = static_cast<int64_t>(s[2]) * s[3] * s[4];
    Tensor out(s);
    Tensor inv_stds({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const real* xp = x.value().ptr() + (static_cast<int64_t>(n) * C + c) * m;
            real* yp = out.ptr() + (static_cast<int64_t>(n) * C + c) * m;
            real mu, is;
            norm_stats(xp, m, eps, mu, is);
            inv_stds.data[static_cast<size_t>(n) * C + c] = is;
            for (int64_t i = 0; i < m; ++i) yp[i] = (xp[i] - mu) * is;
        }
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, N, C, m, inv_stds](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const real* g = self.grad.ptr();
        const real* y = self.value.ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const int64_t base = (static_cast<int64_t>(n) * C + c) * m;
                const real is = inv_stds.data[static_cast<size_t>(n) * C + c];
                real gsum = 0.0, gysum = 0.0;
                for (int64_t i = 0; i < m; ++i) {
                    gsum += g[base + i];
                    gysum += g[base + i] * y[base + i];
                }
                const real gm = gsum / static_cast<real>(m);
                const real gym = gysum / static_cast<real>(m);
                real* gx = px->grad.ptr() + base;
                for (int64_t i = 0; i < m; ++i)
                    gx[i] += is * (g[base + i] - gm - y[base + i] * gym);
            }
    });
}

Var adain(const Var& x, const Var& gamma, const Var& beta, real eps) {
    const auto& s = x.shape();
    check(s.size() == 5, "adain expects [N,C,D,H,W]");
    const int N = s[0], C = s[1];
    check(gamma.shape() == std::vector<int>({N, C}) && beta.shape() == std::vector<int>({N, C}),
          "adain: gamma/beta must be [N,C]; feature channels = " + std::to_string(C));
    const int64_t m = static_cast<int64_t>(s[2]) * s[3] * s[4];
    Tensor out(s);
    Tensor xhat(s);
    Tensor inv_stds({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const int64_t base = (static_cast<int64_t>(n) * C + c) * m;
            const real* xp = x.value().ptr() + base;
            real mu, is;
            norm_stats(xp, m, eps, mu, is);
            inv_stds.data[static_cast<size_t>(n) * C + c] = is;
            const real gm = gamma.value().data[static_cast<size_t>(n) * C + c];
            const real bt = beta.value().data[static_cast<size_t>(n) * C + c];
            for (int64_t i = 0; i < m; ++i) {
                const real xh = (xp[i] - mu) * is;
                xhat.data[base + i] = xh;
                out.data[base + i] = gm * xh + bt;
            }
        }
    Var xv = x, gv = gamma, bv = beta;
    return make_op(std::move(out), {x, gamma, beta},
                   [xv, gv, bv, N, C, m, xhat, inv_stds](Node& self) {
        const real* g = self.grad.ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const int64_t base = (static_cast<int64_t>(n) * C + c) * m;
                real gsum = 0.0, gxsum = 0.0;
                for (int64_t i = 0; i < m; ++i) {
                    gsum += g[base + i];
                    gxsum += g[base + i] * xhat.data[base + i];
                }
                if (gv.requires_grad())
                    gv.node()->ensure_grad(), gv.node()->grad.data[static_cast<size_t>(n) * C + c] += gxsum;
                if (bv.requires_grad())
                    bv.node()->ensure_grad(), bv.node()->grad.data[static_cast<size_t>(n) * C + c] += gsum;
                if (xv.requires_grad()) {
                    Node* px = xv.node();
                    px->ensure_grad();
                    const real gm = gv.value().data[static_cast<size_t>(n) * C + c];
                    const real is = inv_stds.data[static_cast<size_t>(n) * C + c];
                    const real gmean = gsum / static_cast<real>(m);
                    const real gxmean = gxsum / static_cast<real>(m);
                    real* gx = px->grad.ptr() + base;
                    for (int64_t i = 0; i < m; ++i)
                        gx[i] += gm * is * (g[base + i] - gmean - xhat.data[base + i] * gxmean);
                }
            }
    });
}

// ------------------------------------------------------------------- pooling

Var avg_pool2(const Var& x) {
    const auto& s = x.shape();
    check(s.size() == 5, "avg_pool2 expects [N,C,D,H,W]");
    const int N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    const int Do = D / 2, Ho = H / 2, Wo = W / 2;
    check(Do > 0 && Ho > 0 && Wo > 0, "avg_pool2: input too small " + shape_str(s));
    Tensor out({N, C, Do, Ho, Wo});
    const real* xp = x.value().ptr();
    real* yp = out.ptr();
    const int64_t ich = static_cast<int64_t>(D) * H * W;
    const int64_t och = static_cast<int64_t>(Do) * Ho * Wo;
    for (int nc = 0; nc < N * C; ++nc) {
        const real* xc = xp + nc * ich;
        real* yc = yp + nc * och;
        for (int z = 0; z < Do; ++z)
            for (int y = 0; y < Ho; ++y)
                for (int xo = 0; xo < Wo; ++xo) {
                    real a = 0.0;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                a += xc[(static_cast<int64_t>(2 * z + dz) * H + 2 * y + dy) * W +
                                        2 * xo + dx];
                    yc[(static_cast<int64_t>(z) * Ho + y) * Wo + xo] = a * 0.125;
                }
    }
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, N, C, D, H, W, Do, Ho, Wo](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const real* g = self.grad.ptr();
        const int64_t ich = static_cast<int64_t>(D) * H * W;
        const int64_t och = static_cast<int64_t>(Do) * Ho * Wo;
        for (int nc = 0; nc < N * C; ++nc) {
            real* gx = px->grad.ptr() + nc * ich;
            const real* gy = g + nc * och;
            for (int z = 0; z < Do; ++z)
                for (int y = 0; y < Ho; ++y)
                    for (int xo = 0; xo < Wo; ++xo) {
                        const real gv = gy[(static_cast<int64_t>(z) * Ho + y) * Wo + xo] * 0.125;
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx)
                                    gx[(static_cast<int64_t>(2 * z + dz) * H + 2 * y + dy) * W +
                                       2 * xo + dx] += gv;
                    }
        }
    });
}

Var upsample_nearest2(const Var& x) {
    const auto& s = x.shape();
    check(s.size() == 5, "upsample_nearest2 expects [N,C,D,H,W]");
    const int N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    Tensor out({N, C, 2 * D, 2 * H, 2 * W});
    const int64_t ich = static_cast<int64_t>(D) * H * W;
    const int64_t och = 8 * ich;
    for (int nc = 0; nc < N * C; ++nc) {
        const real* xc = x.value().ptr() + nc * ich;
        real* yc = out.ptr() + nc * och;
        for (int z = 0; z < 2 * D; ++z)
            for (int y = 0; y < 2 * H; ++y) {
                const real* row = xc + (static_cast<int64_t>(z / 2) * H + y / 2) * W;
                real* orow = yc + (static_cast<int64_t>(z) * 2 * H + y) * 2 * W;
                for (int xo = 0; xo < 2 * W; ++xo) orow[xo] = row[xo / 2];
            }
    }
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, N, C, D, H, W](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const int64_t ich = static_cast<int64_t>(D) * H * W;
        const int64_t och = 8 * ich;
        for (int nc = 0; nc < N * C; ++nc) {
            real* gx = px->grad.ptr() + nc * ich;
            const real* gy = self.grad.ptr() + nc * och;
            for (int z = 0; z < 2 * D; ++z)
                for (int y = 0; y < 2 * H; ++y) {
                    real* grow = gx + (static_cast<int64_t>(z / 2) * H + y / 2) * W;
                    const real* gorow = gy + (static_cast<int64_t>(z) * 2 * H + y) * 2 * W;
                    for (int xo = 0; xo < 2 * W; ++xo) grow[xo / 2] += gorow[xo];
                }
        }
    });
}

namespace {

// Voxel-center mapping for x2 upsampling: src = (dst + 0.5)/2 - 0.5.
inline void up2_coeff(int dst, int n_src, int& i0, int& i1, real& w1) {
    const real p = (dst + 0.5) * 0.5 - 0.5;
    real fl = std::floor(p);
    i0 = static_cast<int>(fl);
    w1 = p - fl;
    i1 = i0 + 1;
    if (i0 < 0) { i0 = 0; i1 = 0; w1 = 0.0; }
    if (i1 > n_src - 1) { i1 = n_src - 1; i0 = n_src - 1; w1 = 0.0; }
}

} // namespace

Var upsample_trilinear2(const Var& x) {
    const auto& s = x.shape();
    check(s.size() == 5, "upsample_trilinear2 expects [N,C,D,H,W]");
    const int N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    const int Do = 2 * D, Ho = 2 * H, Wo = 2 * W;
    Tensor out({N, C, Do, Ho, Wo});
    const int64_t ich = static_cast<int64_t>(D) * H * W;
    const int64_t och = static_cast<int64_t>(Do) * Ho * Wo;
    for (int nc = 0; nc < N * C; ++nc) {
        const real* xc = x.value().ptr() + nc * ich;
        real* yc = out.ptr() + nc * och;
        for (int z = 0; z < Do; ++z) {
            int z0, z1; real wz;
            up2_coeff(z, D, z0, z1, wz);
            for (int y = 0; y < Ho; ++y) {
                int y0, y1; real wy;
                up2_coeff(y, H, y0, y1, wy);
                for (int xo = 0; xo < Wo; ++xo) {
                    int x0, x1; real wx;
                    up2_coeff(xo, W, x0, x1, wx);
                    auto at = [&](int zz, int yy, int xx) {
                        return xc[(static_cast<int64_t>(zz) * H + yy) * W + xx];
                    };
                    const real v =
                        (1 - wz) * ((1 - wy) * ((1 - wx) * at(z0, y0, x0) + wx * at(z0, y0, x1)) +
                                    wy * ((1 - wx) * at(z0, y1, x0) + wx * at(z0, y1, x1))) +
                        wz * ((1 - wy) * ((1 - wx) * at(z1, y0, x0) + wx * at(z1, y0, x1)) +
                              wy * ((1 - wx) * at(z1, y1, x0) + wx * at(z1, y1, x1)));
                    yc[(static_cast<int64_t>(z) * Ho + y) * Wo + xo] = v;
                }
            }
        }
    }
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, N, C, D, H, W, Do, Ho, Wo](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const int64_t ich = static_cast<int64_t>(D) * H * W;
        const int64_t och = static_cast<int64_t>(Do) * Ho * Wo;
        for (int nc = 0; nc < N * C; ++nc) {
            real* gx = px->grad.ptr() + nc * ich;
            const real* gy = self.grad.ptr() + nc * och;
            for (int z = 0; z < Do; ++z) {
                int z0, z1; real wz;
                up2_coeff(z, D, z0, z1, wz);
                for (int y = 0; y < Ho; ++y) {
                    int y0, y1; real wy;
                    up2_coeff(y, H, y0, y1, wy);
                    for (int xo = 0; xo < Wo; ++xo) {
                        int x0, x1; real wx;
                        up2_coeff(xo, W, x0, x1, wx);
                        const real g = gy[(static_cast<int64_t>(z) * Ho + y) * Wo + xo];
                        auto add = [&](int zz, int yy, int xx, real w) {
                            gx[(static_cast<int64_t>(zz) * H + yy) * W + xx] += g * w;
                        };
                        add(z0, y0, x0, (1 - wz) * (1 - wy) * (1 - wx));
                        add(z0, y0, x1, (1 - wz) * (1 - wy) * wx);
                        add(z0, y1, x0, (1 - wz) * wy * (1 - wx));
                        add(z0, y1, x1, (1 - wz) * wy * wx);
                        add(z1, y0, x0, wz * (1 - wy) * (1 - wx));
                        add(z1, y0, x1, wz * (1 - wy) * wx);
                        add(z1, y1, x0, wz * wy * (1 - wx));
                        add(z1, y1, x1, wz * wy * wx);
                    }
                }
            }
        }
    });
}

Var global_avg_pool(const Var& x) {
    const auto& s = x.shape();
    check(s.size() == 5, "global_avg_pool expects [N,C,D,H,W]");
    const int N = s[0], C = s[1];
    const int64_t m = static_cast<int64_t>(s[2]) * s[3] * s[4];
    Tensor out({N, C});
    const real inv = 1.0 / static_cast<real>(m);
    for (int nc = 0; nc < N * C; ++nc) {
        const real* xc = x.value().ptr() + nc * m;
        real a = 0.0;
        for (int64_t i = 0; i < m; ++i) a += xc[i];
        out.data[static_cast<size_t>(nc)] = a * inv;
    }
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, N, C, m, inv](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
            const real g = self.grad.data[static_cast<size_t>(nc)] * inv;
            real* gx = px->grad.ptr() + nc * m;
            for (int64_t i = 0; i < m; ++i) gx[i] += g;
        }
    });
}

// -------------------------------------------------------------------- warp

namespace {

struct AxisSample {
    int i0, i1;   // bracketing indices
    real f;       // fractional weight on i1
    real dgrad;   // d f / d p (0 when clamped or degenerate axis)
};

inline AxisSample axis_sample(real p, int n) {
    AxisSample a;
    if (n == 1) {
        a.i0 = a.i1 = 0;
        a.f = 0.0;
        a.dgrad = 0.0;
        return a;
    }
    real fl = std::floor(p);
    int i = static_cast<int>(fl);
    real f = p - fl;
    real dg = 1.0;
    if (i < 0) { i = 0; f = 0.0; dg = 0.0; }
    else if (i > n - 2) {
        i = n - 2;
        f = p - static_cast<real>(i);
        if (f >= 1.0) { f = 1.0; dg = 0.0; }
        else if (f < 0.0) { f = 0.0; dg = 0.0; }
    }
    a.i0 = i;
    a.i1 = i + 1;
    a.f = f;
    a.dgrad = dg;
    return a;
}

} // namespace

Var warp3d(const Var& moving, const Var& flow, WarpMode mode) {
    const auto& sm = moving.shape();
    const auto& sf = flow.shape();
    check(sm.size() == 5, "warp3d: moving must be [N,C,D,H,W]");
    check(sf.size() == 5 && sf[1] == 3, "warp3d: flow must be [N,3,D,H,W]");
    check(sm[0] == sf[0] && sm[2] == sf[2] && sm[3] == sf[3] && sm[4] == sf[4],
          "warp3d: shape mismatch moving " + shape_str(sm) + " vs flow " + shape_str(sf));
    const int N = sm[0], C = sm[1], D = sm[2], H = sm[3], W = sm[4];
    const int64_t m = static_cast<int64_t>(D) * H * W;
    Tensor out(sm);
    const real* mp = moving.value().ptr();
    const real* fp = flow.value().ptr();
    for (int n = 0; n < N; ++n) {
        const real* f0 = fp + (static_cast<int64_t>(n) * 3 + 0) * m;
        const real* f1 = fp + (static_cast<int64_t>(n) * 3 + 1) * m;
        const real* f2 = fp + (static_cast<int64_t>(n) * 3 + 2) * m;
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int64_t idx = (static_cast<int64_t>(z) * H + y) * W + x;
                    if (mode == WarpMode::Nearest) {
                        auto cl = [](real p, int nmax) {
                            int i = static_cast<int>(std::floor(p + 0.5));
                            return std::min(std::max(i, 0), nmax - 1);
                        };
                        const int zi = cl(z + f0[idx], D), yi = cl(y + f1[idx], H), xi = cl(x + f2[idx], W);
                        for (int c = 0; c < C; ++c)
                            out.data[(static_cast<int64_t>(n) * C + c) * m + idx] =
                                mp[(static_cast<int64_t>(n) * C + c) * m +
                                   (static_cast<int64_t>(zi) * H + yi) * W + xi];
                        continue;
                    }
                    const AxisSample az = axis_sample(z + f0[idx], D);
                    const AxisSample ay = axis_sample(y + f1[idx], H);
                    const AxisSample ax = axis_sample(x + f2[idx], W);
                    for (int c = 0; c < C; ++c) {
                        const real* mc = mp + (static_cast<int64_t>(n) * C + c) * m;
                        auto at = [&](int zz, int yy, int xx) {
                            return mc[(static_cast<int64_t>(zz) * H + yy) * W + xx];
                        };
                        const real c00 = at(az.i0, ay.i0, ax.i0) * (1 - ax.f) + at(az.i0, ay.i0, ax.i1) * ax.f;
                        const real c01 = at(az.i0, ay.i1, ax.i0) * (1 - ax.f) + at(az.i0, ay.i1, ax.i1) * ax.f;
                        const real c10 = at(az.i1, ay.i0, ax.i0) * (1 - ax.f) + at(az.i1, ay.i0, ax.i1) * ax.f;
                        const real c11 = at(az.i1, ay.i1, ax.i0) * (1 - ax.f) + at(az.i1, ay.i1, ax.i1) * ax.f;
                        const real c0 = c00 * (1 - ay.f) + c01 * ay.f;
                        const real c1 = c10 * (1 - ay.f) + c11 * ay.f;
                        out.data[(static_cast<int64_t>(n) * C + c) * m + idx] =
                            c0 * (1 - az.f) + c1 * az.f;
                    }
                }
    }
    Var mv = moving, fv = flow;
    return make_op(std::move(out), {moving, flow}, [mv, fv, mode, N, C, D, H, W, m](Node& self) {
        if (mode == WarpMode::Nearest) {
            if (!mv.requires_grad()) return;
            Node* pm = mv.node();
            pm->ensure_grad();
            const real* fp = fv.value().ptr();
            const real* g = self.grad.ptr();
            for (int n = 0; n < N; ++n) {
                const real* f0 = fp + (static_cast<int64_t>(n) * 3 + 0) * m;
                const real* f1 = fp + (static_cast<int64_t>(n) * 3 + 1) * m;
                const real* f2 = fp + (static_cast<int64_t>(n) * 3 + 2) * m;
                for (int z = 0; z < D; ++z)
                    for (int y = 0; y < H; ++y)
                        for (int x = 0; x < W; ++x) {
                            const int64_t idx = (static_cast<int64_t>(z) * H + y) * W + x;
                            auto cl = [](real p, int nmax) {
                                int i = static_cast<int>(std::floor(p + 0.5));
                                return std::min(std::max(i, 0), nmax - 1);
                            };
                            const int zi = cl(z + f0[idx], D), yi = cl(y + f1[idx], H),
                                      xi = cl(x + f2[idx], W);
                            for (int c = 0; c < C; ++c)
                                pm->grad.data[(static_cast<int64_t>(n) * C + c) * m +
                                              (static_cast<int64_t>(zi) * H + yi) * W + xi] +=
                                    g[(static_cast<int64_t>(n) * C + c) * m + idx];
                        }
            }
            return;
        }
        const bool need_m = mv.requires_grad();
        const bool need_f = fv.requires_grad();
        if (need_m) mv.node()->ensure_grad();
        if (need_f) fv.node()->ensure_grad();
        const real* fp = fv.value().ptr();
        const real* mp = mv.value().ptr();
        const real* g = self.grad.ptr();
        for (int n = 0; n < N; ++n) {
            const real* f0 = fp + (static_cast<int64_t>(n) * 3 + 0) * m;
            const real* f1 = fp + (static_cast<int64_t>(n) * 3 + 1) * m;
            const real* f2 = fp + (static_cast<int64_t>(n) * 3 + 2) * m;
            for (int z = 0; z < D; ++z)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        const int64_t idx = (static_cast<int64_t>(z) * H + y) * W + x;
                        const AxisSample az = axis_sample(z + f0[idx], D);
                        const AxisSample ay = axis_sample(y + f1[idx], H);
                        const AxisSample ax = axis_sample(x + f2[idx], W);
                        real dz_acc = 0.0, dy_acc = 0.0, dx_acc = 0.0;
                        for (int c = 0; c < C; ++c) {
                            const real gc = g[(static_cast<int64_t>(n) * C + c) * m + idx];
                            if (gc == 0.0) continue;
                            const real* mc = mp + (static_cast<int64_t>(n) * C + c) * m;
                            auto ati = [&](int zz, int yy, int xx) {
                                return (static_cast<int64_t>(zz) * H + yy) * W + xx;
                            };
                            const real v000 = mc[ati(az.i0, ay.i0, ax.i0)];
                            const real v001 = mc[ati(az.i0, ay.i0, ax.i1)];
                            const real v010 = mc[ati(az.i0, ay.i1, ax.i0)];
                            const real v011 = mc[ati(az.i0, ay.i1, ax.i1)];
                            const real v100 = mc[ati(az.i1, ay.i0, ax.i0)];
                            const real v101 = mc[ati(az.i1, ay.i0, ax.i1)];
                            const real v110 = mc[ati(az.i1, ay.i1, ax.i0)];
                            const real v111 = mc[ati(az.i1, ay.i1, ax.i1)];
                            const real wz0 = 1 - az.f, wz1 = az.f;
                            const real wy0 = 1 - ay.f, wy1 = ay.f;
                            const real wx0 = 1 - ax.f, wx1 = ax.f;
                            if (need_m) {
                                real* gm = mv.node()->grad.ptr() + (static_cast<int64_t>(n) * C + c) * m;
                                gm[ati(az.i0, ay.i0, ax.i0)] += gc * wz0 * wy0 * wx0;
                                gm[ati(az.i0, ay.i0, ax.i1)] += gc * wz0 * wy0 * wx1;
                                gm[ati(az.i0, ay.i1, ax.i0)] += gc * wz0 * wy1 * wx0;
                                gm[ati(az.i0, ay.i1, ax.i1)] += gc * wz0 * wy1 * wx1;
                                gm[ati(az.i1, ay.i0, ax.i0)] += gc * wz1 * wy0 * wx0;
                                gm[ati(az.i1, ay.i0, ax.i1)] += gc * wz1 * wy0 * wx1;
                                gm[ati(az.i1, ay.i1, ax.i0)] += gc * wz1 * wy1 * wx0;
                                gm[ati(az.i1, ay.i1, ax.i1)] += gc * wz1 * wy1 * wx1;
                            }
                            if (need_f) {
                                dz_acc += gc * (wy0 * (wx0 * (v100 - v000) + wx1 * (v101 - v001)) +
                                                wy1 * (wx0 * (v110 - v010) + wx1 * (v111 - v011)));
                                dy_acc += gc * (wz0 * (wx0 * (v010 - v000) + wx1 * (v011 - v001)) +
                                                wz1 * (wx0 * (v110 - v100) + wx1 * (v111 - v101)));
                                dx_acc += gc * (wz0 * (wy0 * (v001 - v000) + wy1 * (v011 - v010)) +
                                                wz1 * (wy0 * (v101 - v100) + wy1 * (v111 - v110)));
                            }
                        }
                        if (need_f) {
                            real* gf = fv.node()->grad.ptr();
                            gf[(static_cast<int64_t>(n) * 3 + 0) * m + idx] += dz_acc * az.dgrad;
                            gf[(static_cast<int64_t>(n) * 3 + 1) * m + idx] += dy_acc * ay.dgrad;
                            gf[(static_cast<int64_t>(n) * 3 + 2) * m + idx] += dx_acc * ax.dgrad;
                        }
                    }
        }
    });
}

// ----------------------------------------------------------------- filtering

Var filter_axis_valid(const Var& x, const std::vector<real>& kernel, int axis) {
    const auto& s = x.shape();
    check(s.size() == 5, "filter_axis_valid expects [N,C,D,H,W]");
    check(axis >= 2 && axis <= 4, "filter_axis_valid: axis must be 2, 3 or 4");
    const int k = static_cast<int>(kernel.size());
    check(k >= 1 && s[axis] >= k, "filter_axis_valid: axis extent " + std::to_string(s[axis]) +
                                      " smaller than kernel " + std::to_string(k));
    std::vector<int> os = s;
    os[axis] = s[axis] - k + 1;
    Tensor out(os);
    const int D = s[2], H = s[3], W = s[4];
    const int64_t stride = axis == 2 ? static_cast<int64_t>(H) * W : (axis == 3 ? W : 1);
    const int64_t ich = static_cast<int64_t>(D) * H * W;
    const int64_t och = static_cast<int64_t>(os[2]) * os[3] * os[4];
    const int NC = s[0] * s[1];
    for (int nc = 0; nc < NC; ++nc) {
        const real* xc = x.value().ptr() + nc * ich;
        real* yc = out.ptr() + nc * och;
        int64_t o = 0;
        for (int z = 0; z < os[2]; ++z)
            for (int y = 0; y < os[3]; ++y)
                for (int xo = 0; xo < os[4]; ++xo, ++o) {
                    const real* base = xc + (static_cast<int64_t>(z) * H + y) * W + xo;
                    real a = 0.0;
                    for (int j = 0; j < k; ++j) a += kernel[static_cast<size_t>(j)] * base[j * stride];
                    yc[o] = a;
                }
    }
    Var xv = x;
    std::vector<real> kern = kernel;
    return make_op(std::move(out), {x}, [xv, kern, axis, s, os, stride, ich, och, NC](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const int k = static_cast<int>(kern.size());
        const int H = s[3], W = s[4];
        for (int nc = 0; nc < NC; ++nc) {
            real* gx = px->grad.ptr() + nc * ich;
            const real* gy = self.grad.ptr() + nc * och;
            int64_t o = 0;
            for (int z = 0; z < os[2]; ++z)
                for (int y = 0; y < os[3]; ++y)
                    for (int xo = 0; xo < os[4]; ++xo, ++o) {
                        real* base = gx + (static_cast<int64_t>(z) * H + y) * W + xo;
                        const real g = gy[o];
                        for (int j = 0; j < k; ++j) base[j * stride] += g * kern[static_cast<size_t>(j)];
                    }
        }
    });
}

// ----------------------------------------------------------- classification

Var softmax_channels(const Var& x) {
    const auto& s = x.shape();
    check(s.size() == 5, "softmax_channels expects [N,C,D,H,W]");
    const int N = s[0], C = s[1];
    const int64_t m = static_cast<int64_t>(s[2]) * s[3] * s[4];
    Tensor out(s);
    const real* xp = x.value().ptr();
    for (int n = 0; n < N; ++n)
        for (int64_t i = 0; i < m; ++i) {
            real mx = -1e300;
            for (int c = 0; c < C; ++c)
                mx = std::max(mx, xp[(static_cast<int64_t>(n) * C + c) * m + i]);
            real sum = 0.0;
            for (int c = 0; c < C; ++c)
                sum += std::exp(xp[(static_cast<int64_t>(n) * C + c) * m + i] - mx);
            for (int c = 0; c < C; ++c)
                out.data[(static_cast<int64_t>(n) * C + c) * m + i] =
                    std::exp(xp[(static_cast<int64_t>(n) * C + c) * m + i] - mx) / sum;
        }
    Var xv = x;
    return make_op(std::move(out), {x}, [xv, N, C, m](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const real* y = self.value.ptr();
        const real* g = self.grad.ptr();
        for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < m; ++i) {
                real dot = 0.0;
                for (int c = 0; c < C; ++c) {
                    const int64_t idx = (static_cast<int64_t>(n) * C + c) * m + i;
                    dot += g[idx] * y[idx];
                }
                for (int c = 0; c < C; ++c) {
                    const int64_t idx = (static_cast<int64_t>(n) * C + c) * m + i;
                    px->grad.data[idx] += y[idx] * (g[idx] - dot);
                }
            }
    });
}

Var cross_entropy(const Var& logits, const Tensor& labels) {
    const auto& s = logits.shape();
    check(s.size() == 5, "cross_entropy expects logits [N,C,D,H,W]");
    check(labels.shape == std::vector<int>({s[0], s[2], s[3], s[4]}),
          "cross_entropy: labels must be [N,D,H,W] matching logits");
    const int N = s[0], C = s[1];
    const int64_t m = static_cast<int64_t>(s[2]) * s[3] * s[4];
    const real inv = 1.0 / static_cast<real>(static_cast<int64_t>(N) * m);
    const real* xp = logits.value().ptr();
    real loss = 0.0;
    for (int n = 0; n < N; ++n)
        for (int64_t i = 0; i < m; ++i) {
            real mx = -1e300;
            for (int c = 0; c < C; ++c)
                mx = std::max(mx, xp[(static_cast<int64_t>(n) * C + c) * m + i]);
            real sum = 0.0;
            for (int c = 0; c < C; ++c)
                sum += std::exp(xp[(static_cast<int64_t>(n) * C + c) * m + i] - mx);
            const int lab = static_cast<int>(labels.data[static_cast<size_t>(n) * m + i]);
            check(lab >= 0 && lab < C, "cross_entropy: label out of range");
            loss += mx + std::log(sum) - xp[(static_cast<int64_t>(n) * C + lab) * m + i];
        }
    Var xv = logits;
    Tensor labs = labels;
    return make_op(Tensor::scalar(loss * inv), {logits}, [xv, labs, N, C, m, inv](Node& self) {
        Node* px = xv.node();
        px->ensure_grad();
        const real g = self.grad.data[0] * inv;
        const real* xp = px->value.ptr();
        for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < m; ++i) {
                real mx = -1e300;
                for (int c = 0; c < C; ++c)
                    mx = std::max(mx, xp[(static_cast<int64_t>(n) * C + c) * m + i]);
                real sum = 0.0;
                for (int c = 0; c < C; ++c)
                    sum += std::exp(xp[(static_cast<int64_t>(n) * C + c) * m + i] - mx);
                const int lab = static_cast<int>(labs.data[static_cast<size_t>(n) * m + i]);
                for (int c = 0; c < C; ++c) {
                    const int64_t idx = (static_cast<int64_t>(n) * C + c) * m + i;
                    const real p = std::exp(xp[idx] - mx) / sum;
                    px->grad.data[idx] += g * (p - (c == lab ? 1.0 : 0.0));
                }
            }
    });
}

// ------------------------------------------------------------ flow gradient

Var flow_grad_l1(const Var& flow) {
    const auto& s = flow.shape();
    check(s.size() == 5 && s[1] == 3, "flow_grad_l1 expects [N,3,D,H,W]");
    const int N = s[0], D = s[2], H = s[3], W = s[4];
    const int64_t m = static_cast<int64_t>(D) * H * W;
    const int64_t per_comp = static_cast<int64_t>(D - 1) * H * W +
                             static_cast<int64_t>(D) * (H - 1) * W +
                             static_cast<int64_t>(D) * H * (W - 1);
    const int64_t count = static_cast<int64_t>(N) * 3 * per_comp;
    const real* fp = flow.value().ptr();
    real total = 0.0;
    for (int nc = 0; nc < N * 3; ++nc) {
        const real* f = fp + nc * m;
        for (int z = 0; z + 1 < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    total += std::fabs(f[(static_cast<int64_t>(z + 1) * H + y) * W + x] -
                                       f[(static_cast<int64_t>(z) * H + y) * W + x]);
        for (int z = 0; z < D; ++z)
            for (int y = 0; y + 1 < H; ++y)
                for (int x = 0; x < W; ++x)
                    total += std::fabs(f[(static_cast<int64_t>(z) * H + y + 1) * W + x] -
                                       f[(static_cast<int64_t>(z) * H + y) * W + x]);
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x + 1 < W; ++x)
                    total += std::fabs(f[(static_cast<int64_t>(z) * H + y) * W + x + 1] -
                                       f[(static_cast<int64_t>(z) * H + y) * W + x]);
    }
    const real value = count > 0 ? total / static_cast<real>(count) : 0.0;
    Var fvar = flow;
    return make_op(Tensor::scalar(value), {flow}, [fvar, N, D, H, W, m, count](Node& self) {
        if (count == 0) return;
        Node* pf = fvar.node();
        pf->ensure_grad();
        const real g = self.grad.data[0] / static_cast<real>(count);
        const real* fp = pf->value.ptr();
        real* gf = pf->grad.ptr();
        auto step = [&](int64_t a, int64_t b) {
            const real d = fp[b] - fp[a];
            const real sg = d > 0 ? g : (d < 0 ? -g : 0.0);
            gf[b] += sg;
            gf[a] -= sg;
        };
        for (int nc = 0; nc < N * 3; ++nc) {
            const int64_t base = nc * m;
            for (int z = 0; z + 1 < D; ++z)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        step(base + (static_cast<int64_t>(z) * H + y) * W + x,
                             base + (static_cast<int64_t>(z + 1) * H + y) * W + x);
            for (int z = 0; z < D; ++z)
                for (int y = 0; y + 1 < H; ++y)
                    for (int x = 0; x < W; ++x)
                        step(base + (static_cast<int64_t>(z) * H + y) * W + x,
                             base + (static_cast<int64_t>(z) * H + y + 1) * W + x);
            for (int z = 0; z < D; ++z)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x + 1 < W; ++x)
                        step(base + (static_cast<int64_t>(z) * H + y) * W + x,
                             base + (static_cast<int64_t>(z) * H + y) * W + x + 1);
        }
    });
}

// ------------------------------------------------------------------ modules

Tensor kaiming_tensor(Rng& rng, std::vector<int> shape, int fan_in, real gain) {
    Tensor t(std::move(shape));
    const real std = gain / std::sqrt(static_cast<real>(fan_in));
    for (auto& v : t.data) v = rng.normal(0.0, std);
    return t;
}

Conv3dLayer::Conv3dLayer(Rng& rng, int cin, int cout, int k, int stride_, int pad_) {
    stride = stride_;
    pad = pad_;
    w = parameter(kaiming_tensor(rng, {cout, cin, k, k, k}, cin * k * k * k));
    b = parameter(Tensor::zeros({cout}));
}

void Conv3dLayer::zero_init() {
    for (auto& v : w.mutable_value().data) v = 0.0;
    for (auto& v : b.mutable_value().data) v = 0.0;
}

LinearLayer::LinearLayer(Rng& rng, int in, int out) {
    w = parameter(kaiming_tensor(rng, {out, in}, in, 1.0));
    b = parameter(Tensor::zeros({out}));
}

} // namespace ad
} // namespace atlasgen

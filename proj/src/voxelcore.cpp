#include "atlasgen/voxelcore.hpp"

#include <algorithm>
#include <cmath>

namespace atlasgen {
namespace voxelcore {

void Volume::validate_shape() const {
    check(data.ndim() == 3, "Volume data must be [D,H,W], got " + shape_str(data.shape));
    check(channels == 1, "image volumes carry a single channel");
}

void Volume::validate_normalized() const {
    validate_shape();
    for (real v : data.data)
        check(std::isfinite(v) && v >= 0.0 && v <= 1.0,
              "Volume intensities must be finite and in [0,1]");
}

void SegmentationMap::validate() const {
    check(labels.ndim() == 3, "SegmentationMap labels must be [D,H,W], got " + shape_str(labels.shape));
    check(num_classes > 0, "SegmentationMap needs a positive class count");
    for (real v : labels.data) {
        check(v == std::floor(v) && v >= 0.0 && v < static_cast<real>(num_classes),
              "label outside [0, num_classes) found");
    }
}

void FlowField::validate() const {
    check(vectors.ndim() == 4 && vectors.dim(0) == 3,
          "FlowField must be [3,D,H,W], got " + shape_str(vectors.shape));
    check(vectors.all_finite(), "FlowField has non-finite components");
}

// -------------------------------------------------------------------- batches

Tensor volume_batch(const std::vector<const Volume*>& vols) {
    check(!vols.empty(), "volume_batch: empty batch");
    const auto& s = vols[0]->data.shape;
    Tensor out({static_cast<int>(vols.size()), 1, s[0], s[1], s[2]});
    const int64_t m = numel_of(s);
    for (size_t n = 0; n < vols.size(); ++n) {
        check(vols[n]->data.shape == s, "volume_batch: mixed shapes in batch");
        std::copy_n(vols[n]->data.ptr(), m, out.ptr() + static_cast<int64_t>(n) * m);
    }
    return out;
}

Tensor volume_batch(const Volume& v) { return volume_batch(std::vector<const Volume*>{&v}); }

Tensor flow_batch(const FlowField& f) {
    const auto& s = f.vectors.shape;
    Tensor out({1, 3, s[1], s[2], s[3]});
    std::copy_n(f.vectors.ptr(), f.vectors.numel(), out.ptr());
    return out;
}

Volume volume_from_batch(const Tensor& batch, int n, const VolumeMeta& meta) {
    check(batch.ndim() == 5 && batch.dim(1) == 1, "volume_from_batch expects [N,1,D,H,W]");
    Tensor t({batch.dim(2), batch.dim(3), batch.dim(4)});
    std::copy_n(batch.ptr() + static_cast<int64_t>(n) * t.numel(), t.numel(), t.ptr());
    Volume v(std::move(t));
    v.meta = meta;
    return v;
}

FlowField flow_from_batch(const Tensor& batch, int n) {
    check(batch.ndim() == 5 && batch.dim(1) == 3, "flow_from_batch expects [N,3,D,H,W]");
    Tensor t({3, batch.dim(2), batch.dim(3), batch.dim(4)});
    std::copy_n(batch.ptr() + static_cast<int64_t>(n) * t.numel(), t.numel(), t.ptr());
    return FlowField(std::move(t));
}

// ---------------------------------------------------------------------- warp

Volume warp_volume(const Volume& moving, const FlowField& flow, WarpInterp mode) {
    check(std::vector<int>{flow.depth(), flow.height(), flow.width()} == moving.data.shape,
          "warp_volume: moving " + shape_str(moving.data.shape) + " vs flow " +
              shape_str(flow.vectors.shape) + " shape mismatch");
    ad::NoGradGuard ng;
    ad::Var m = ad::constant(volume_batch(moving));
    ad::Var f = ad::constant(flow_batch(flow));
    ad::Var out = ad::warp3d(m, f, mode == WarpInterp::Trilinear ? ad::WarpMode::Trilinear
                                                                 : ad::WarpMode::Nearest);
    Volume res = volume_from_batch(out.value(), 0, moving.meta);
    return res;
}

SegmentationMap warp_labels(const SegmentationMap& seg, const FlowField& flow) {
    check(std::vector<int>{flow.depth(), flow.height(), flow.width()} == seg.labels.shape,
          "warp_labels: labels " + shape_str(seg.labels.shape) + " vs flow " +
              shape_str(flow.vectors.shape) + " shape mismatch");
    ad::NoGradGuard ng;
    const int C = seg.num_classes;
    const auto& s = seg.labels.shape;
    const int64_t m = numel_of(s);
    Tensor onehot({1, C, s[0], s[1], s[2]});
    for (int64_t i = 0; i < m; ++i)
        onehot.data[static_cast<size_t>(seg.label_at(i)) * m + i] = 1.0;
    ad::Var warped = ad::warp3d(ad::constant(std::move(onehot)), ad::constant(flow_batch(flow)),
                                ad::WarpMode::Trilinear);
    Tensor out(s);
    const real* wp = warped.value().ptr();
    for (int64_t i = 0; i < m; ++i) {
        int best = 0;
        real bw = wp[i];
        for (int c = 1; c < C; ++c) {
            const real w = wp[static_cast<int64_t>(c) * m + i];
            if (w > bw) { bw = w; best = c; } // ties keep the lowest label
        }
        out.data[static_cast<size_t>(i)] = static_cast<real>(best);
    }
    return SegmentationMap(std::move(out), C);
}

// --------------------------------------------------------------------- MS-SSIM

namespace {

std::vector<real> gaussian_kernel(int window, real sigma) {
    std::vector<real> k(static_cast<size_t>(window));
    const real c = (window - 1) / 2.0;
    real sum = 0.0;
    for (int i = 0; i < window; ++i) {
        k[static_cast<size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        sum += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

ad::Var gaussian_blur_valid(const ad::Var& x, const std::vector<real>& k) {
    ad::Var h = ad::filter_axis_valid(x, k, 2);
    h = ad::filter_axis_valid(h, k, 3);
    return ad::filter_axis_valid(h, k, 4);
}

ad::Var ssim_mean_single_scale(const ad::Var& u, const ad::Var& v, const std::vector<real>& k,
                               const SsimOptions& o) {
    using namespace ad;
    Var mu_u = gaussian_blur_valid(u, k);
    Var mu_v = gaussian_blur_valid(v, k);
    Var uu = gaussian_blur_valid(mul(u, u), k);
    Var vv = gaussian_blur_valid(mul(v, v), k);
    Var uv = gaussian_blur_valid(mul(u, v), k);
    Var mu_u2 = mul(mu_u, mu_u);
    Var mu_v2 = mul(mu_v, mu_v);
    Var mu_uv = mul(mu_u, mu_v);
    Var var_u = sub(uu, mu_u2);
    Var var_v = sub(vv, mu_v2);
    Var cov = sub(uv, mu_uv);
    Var num = mul(add_scalar(mul_scalar(mu_uv, 2.0), o.c1), add_scalar(mul_scalar(cov, 2.0), o.c2));
    Var den = mul(add_scalar(add(mu_u2, mu_v2), o.c1), add_scalar(add(var_u, var_v), o.c2));
    return mean(div_(num, den));
}

} // namespace

int ssim_scale_count(const std::vector<int>& dims, const SsimOptions& opts) {
    int scales = 0;
    std::vector<int> d = dims;
    while (scales < opts.max_scales) {
        int mn = *std::min_element(d.begin(), d.end());
        if (mn < opts.window) break;
        ++scales;
        for (auto& v : d) v /= 2;
    }
    return scales;
}

ad::Var ssim_l1_loss(const ad::Var& u, const ad::Var& v, const SsimOptions& opts) {
    using namespace ad;
    require_same_shape(u.value(), v.value(), "ssim_l1_loss");
    const auto& s = u.shape();
    check(s.size() == 5 && s[1] == 1, "ssim_l1_loss expects [N,1,D,H,W]");
    const int scales = ssim_scale_count({s[2], s[3], s[4]}, opts);
    if (scales < 1)
        throw ShapeError("ssim_l1_loss: every spatial dimension must be >= the SSIM window (" +
                         std::to_string(opts.window) + "); got " + shape_str(s));
    const auto kernel = gaussian_kernel(opts.window, opts.sigma);
    Var l1 = mean(abs_(sub(u, v)));
    Var us = u, vs = v;
    Var ssim_sum;
    for (int sc = 0; sc < scales; ++sc) {
        Var m = ssim_mean_single_scale(us, vs, kernel, opts);
        ssim_sum = sc == 0 ? m : add(ssim_sum, m);
        if (sc + 1 < scales) {
            us = avg_pool2(us);
            vs = avg_pool2(vs);
        }
    }
    // Equal per-scale weights, renormalized to sum one.
    Var ms = mul_scalar(ssim_sum, 1.0 / scales);
    return add(l1, add_scalar(neg(ms), 1.0));
}

real ssim_l1_loss(const Volume& u, const Volume& v, const SsimOptions& opts) {
    u.validate_normalized();
    v.validate_normalized();
    require_same_shape(u.data, v.data, "ssim_l1_loss");
    ad::NoGradGuard ng;
    return ssim_l1_loss(ad::constant(volume_batch(u)), ad::constant(volume_batch(v)), opts).item();
}

// ------------------------------------------------------------------------ NCC

ad::Var ncc_loss(const ad::Var& u, const ad::Var& v, int window, real eps) {
    using namespace ad;
    require_same_shape(u.value(), v.value(), "ncc_loss");
    const auto& s = u.shape();
    check(s.size() == 5 && s[1] == 1, "ncc_loss expects [N,1,D,H,W]");
    check(window >= 1 && window % 2 == 1, "ncc_loss: window must be odd and positive");
    check(window <= std::min({s[2], s[3], s[4]}),
          "ncc_loss: window " + std::to_string(window) + " exceeds min dim of " + shape_str(s));
    const std::vector<real> ones(static_cast<size_t>(window), 1.0);
    auto box = [&](const Var& x) {
        Var h = filter_axis_valid(x, ones, 2);
        h = filter_axis_valid(h, ones, 3);
        return filter_axis_valid(h, ones, 4);
    };
    const real n = static_cast<real>(window) * window * window;
    Var su = box(u), sv = box(v);
    Var suu = box(mul(u, u)), svv = box(mul(v, v)), suv = box(mul(u, v));
    Var cross = sub(suv, mul_scalar(mul(su, sv), 1.0 / n));
    Var var_u = sub(suu, mul_scalar(mul(su, su), 1.0 / n));
    Var var_v = sub(svv, mul_scalar(mul(sv, sv), 1.0 / n));
    Var cc = div_(mul(cross, cross), add_scalar(mul(var_u, var_v), eps));
    return add_scalar(neg(mean(cc)), 1.0);
}

real ncc_loss(const Volume& u, const Volume& v, int window, real eps) {
    require_same_shape(u.data, v.data, "ncc_loss");
    ad::NoGradGuard ng;
    return ncc_loss(ad::constant(volume_batch(u)), ad::constant(volume_batch(v)), window, eps).item();
}

// -------------------------------------------------------------- flow gradient

real flow_gradient_l1(const FlowField& flow) {
    ad::NoGradGuard ng;
    return ad::flow_grad_l1(ad::constant(flow_batch(flow))).item();
}

// ----------------------------------------------------------------------- dice

std::vector<real> dice_per_class(const SegmentationMap& pred, const SegmentationMap& gt) {
    check(pred.num_classes == gt.num_classes,
          "dice: class count mismatch " + std::to_string(pred.num_classes) + " vs " +
              std::to_string(gt.num_classes));
    require_same_shape(pred.labels, gt.labels, "dice");
    const int C = pred.num_classes;
    std::vector<int64_t> np(static_cast<size_t>(C), 0), ng(static_cast<size_t>(C), 0),
        ni(static_cast<size_t>(C), 0);
    const int64_t m = pred.labels.numel();
    for (int64_t i = 0; i < m; ++i) {
        const int p = pred.label_at(i);
        const int g = gt.label_at(i);
        ++np[static_cast<size_t>(p)];
        ++ng[static_cast<size_t>(g)];
        if (p == g) ++ni[static_cast<size_t>(p)];
    }
    std::vector<real> dice(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        const int64_t denom = np[static_cast<size_t>(c)] + ng[static_cast<size_t>(c)];
        dice[static_cast<size_t>(c)] =
            denom == 0 ? 1.0 : 2.0 * static_cast<real>(ni[static_cast<size_t>(c)]) / static_cast<real>(denom);
    }
    return dice;
}

real dice_score(const SegmentationMap& pred, const SegmentationMap& gt, const DiceOptions& opts) {
    const auto d = dice_per_class(pred, gt);
    const size_t start = opts.include_background ? 0 : 1;
    check(d.size() > start, "dice_score: no classes left after excluding background");
    real s = 0.0;
    for (size_t c = start; c < d.size(); ++c) s += d[c];
    return s / static_cast<real>(d.size() - start);
}

// --------------------------------------------------------------------- LS-GAN

real lsgan_losses(const std::vector<real>& real_scores, const std::vector<real>& fake_scores,
                  GanSide side) {
    auto mean_of = [](const std::vector<real>& v, real target) {
        check(!v.empty(), "lsgan_losses: empty score batch");
        real s = 0.0;
        for (real x : v) {
            check(std::isfinite(x), "lsgan_losses: non-finite score");
            const real d = x - target;
            s += d * d;
        }
        return s / static_cast<real>(v.size());
    };
    if (side == GanSide::Generator) return mean_of(fake_scores, 1.0);
    return mean_of(real_scores, 1.0) + mean_of(fake_scores, 0.0);
}

ad::Var lsgan_generator_loss(const ad::Var& fake_scores) {
    return ad::mean(ad::square(ad::add_scalar(fake_scores, -1.0)));
}

ad::Var lsgan_discriminator_loss(const ad::Var& real_scores, const ad::Var& fake_scores) {
    return ad::add(ad::mean(ad::square(ad::add_scalar(real_scores, -1.0))),
                   ad::mean(ad::square(fake_scores)));
}

} // namespace voxelcore
} // namespace atlasgen

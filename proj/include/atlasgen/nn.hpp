#pragma once

#include <string>
#include <utility>
#include <vector>

#include "atlasgen/autodiff.hpp"
#include "atlasgen/rng.hpp"

namespace atlasgen {
namespace ad {

enum class WarpMode { Trilinear, Nearest };

// x [N,Ci,D,H,W], w [Co,Ci,kd,kh,kw], b [Co] (optional, may be undefined Var).
Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// Per-(sample, channel) normalization over spatial dims, no affine term.
Var instance_norm(const Var& x, real eps = 1e-5);

// Per-(sample, channel) normalization followed by style-derived scale/shift.
// gamma, beta: [N,C].
Var adain(const Var& x, const Var& gamma, const Var& beta, real eps = 1e-5);

Var avg_pool2(const Var& x);          // kernel 2, stride 2, floor
Var upsample_nearest2(const Var& x);  // exact x2
Var upsample_trilinear2(const Var& x);// exact x2, voxel-center aligned
Var global_avg_pool(const Var& x);    // [N,C,D,H,W] -> [N,C]

// moving [N,C,D,H,W], flow [N,3,D,H,W] (voxel displacements along D,H,W).
// Samples moving at p + flow(p); coordinates clamped to the border.
Var warp3d(const Var& moving, const Var& flow, WarpMode mode);

// 1D correlation along one spatial axis (2=D,3=H,4=W), valid extent only.
Var filter_axis_valid(const Var& x, const std::vector<real>& kernel, int axis);

Var softmax_channels(const Var& x); // [N,C,D,H,W]

// labels: [N,D,H,W] tensor holding integral class ids; mean NLL over voxels.
Var cross_entropy(const Var& logits, const Tensor& labels);

// Mean |forward difference| over every axis and component of a flow batch
// [N,3,D,H,W]; degenerate axes contribute no terms.
Var flow_grad_l1(const Var& flow);

// ------------------------------------------------------------------ modules

struct ParamMap {
    std::vector<std::pair<std::string, Var>> items;
    void add(const std::string& name, const Var& v) { items.emplace_back(name, v); }
};

// He-style init for conv/linear weights feeding leaky activations.
Tensor kaiming_tensor(Rng& rng, std::vector<int> shape, int fan_in, real gain = std::sqrt(2.0));

struct Conv3dLayer {
    Var w, b;
    int stride = 1, pad = 1;
    Conv3dLayer() = default;
    Conv3dLayer(Rng& rng, int cin, int cout, int k, int stride, int pad);
    Var forward(const Var& x) const { return conv3d(x, w, b, stride, pad); }
    void collect(ParamMap& pm, const std::string& prefix) const {
        pm.add(prefix + ".w", w);
        pm.add(prefix + ".b", b);
    }
    void zero_init();
};

struct LinearLayer {
    Var w, b;
    LinearLayer() = default;
    LinearLayer(Rng& rng, int in, int out);
    Var forward(const Var& x) const { return linear(x, w, b); }
    void collect(ParamMap& pm, const std::string& prefix) const {
        pm.add(prefix + ".w", w);
        pm.add(prefix + ".b", b);
    }
};

} // namespace ad
} // namespace atlasgen

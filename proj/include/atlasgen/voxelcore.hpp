#pragma once

#include <vector>

#include "atlasgen/nn.hpp"
#include "atlasgen/tensor.hpp"

namespace atlasgen {
namespace voxelcore {

// Spatial metadata carried through I/O (voxel spacing / origin, NIfTI-style).
struct VolumeMeta {
    double spacing[3] = {1.0, 1.0, 1.0};
    double origin[3] = {0.0, 0.0, 0.0};
};

// Dense scalar grid [D,H,W]; normalized images live in [0,1].
struct Volume {
    Tensor data;
    int channels = 1;
    VolumeMeta meta;

    Volume() = default;
    explicit Volume(Tensor t) : data(std::move(t)) { validate_shape(); }

    int depth() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }

    void validate_shape() const;
    void validate_normalized() const; // finite + [0,1]
};

// Integer label grid aligned with a Volume; labels in [0, num_classes).
struct SegmentationMap {
    Tensor labels; // integral values stored as real
    int num_classes = 0;

    SegmentationMap() = default;
    SegmentationMap(Tensor t, int classes) : labels(std::move(t)), num_classes(classes) {
        validate();
    }

    int label_at(int64_t i) const { return static_cast<int>(labels.data[static_cast<size_t>(i)]); }
    void validate() const;
};

// Per-voxel displacement field, components ordered along (D,H,W): [3,D,H,W].
struct FlowField {
    Tensor vectors;

    FlowField() = default;
    explicit FlowField(Tensor t) : vectors(std::move(t)) { validate(); }

    static FlowField zeros(int d, int h, int w) { return FlowField(Tensor({3, d, h, w})); }

    int depth() const { return vectors.dim(1); }
    int height() const { return vectors.dim(2); }
    int width() const { return vectors.dim(3); }
    void validate() const;
};

// ---- batch helpers ----------------------------------------------------------

Tensor volume_batch(const std::vector<const Volume*>& vols); // [N,1,D,H,W]
Tensor volume_batch(const Volume& v);                         // [1,1,D,H,W]
Tensor flow_batch(const FlowField& f);                        // [1,3,D,H,W]
Volume volume_from_batch(const Tensor& batch, int n = 0, const VolumeMeta& meta = {});
FlowField flow_from_batch(const Tensor& batch, int n = 0);

// ---- warping ----------------------------------------------------------------

enum class WarpInterp { Trilinear, Nearest };

// output(x) = moving(x + flow(x)); out-of-bounds sample coordinates clamp to
// the border. Trilinear is differentiable through the ad:: path (warp3d).
Volume warp_volume(const Volume& moving, const FlowField& flow,
                   WarpInterp mode = WarpInterp::Trilinear);

// One-hot encode, warp each channel trilinearly, argmax (ties -> lowest label).
SegmentationMap warp_labels(const SegmentationMap& seg, const FlowField& flow);

// ---- losses -----------------------------------------------------------------

struct SsimOptions {
    int window = 11;     // 3D Gaussian window size
    real sigma = 1.5;
    int max_scales = 3;  // 2x average-pool pyramid; reduced when dims are small
    real c1 = 0.01 * 0.01;
    real c2 = 0.03 * 0.03;
};

// Number of pyramid scales usable for the given spatial dims.
int ssim_scale_count(const std::vector<int>& spatial_dims, const SsimOptions& opts);

// ||u - v||_1 (mean) + (1 - MS-SSIM(u, v)); inputs [N,1,D,H,W].
ad::Var ssim_l1_loss(const ad::Var& u, const ad::Var& v, const SsimOptions& opts = {});
real ssim_l1_loss(const Volume& u, const Volume& v, const SsimOptions& opts = {});

// 1 - mean local NCC^2 over window^3 neighborhoods (valid extent).
ad::Var ncc_loss(const ad::Var& u, const ad::Var& v, int window = 9, real eps = 1e-5);
real ncc_loss(const Volume& u, const Volume& v, int window = 9, real eps = 1e-5);

// Mean |forward difference| of the flow over all axes and components.
real flow_gradient_l1(const FlowField& flow);
using ad::flow_grad_l1; // differentiable form on [N,3,D,H,W]

// ---- evaluation ---------------------------------------------------------------

struct DiceOptions {
    bool include_background = false; // scalar mean skips class 0 by default
};

// Per class c: 2|P_c n G_c| / (|P_c| + |G_c|); absent from both -> 1.0.
std::vector<real> dice_per_class(const SegmentationMap& pred, const SegmentationMap& gt);
real dice_score(const SegmentationMap& pred, const SegmentationMap& gt,
                const DiceOptions& opts = {});

// ---- LS-GAN ------------------------------------------------------------------

enum class GanSide { Discriminator, Generator };

// Discriminator: mean((real-1)^2) + mean(fake^2); generator: mean((fake-1)^2).
real lsgan_losses(const std::vector<real>& real_scores, const std::vector<real>& fake_scores,
                  GanSide side);
ad::Var lsgan_generator_loss(const ad::Var& fake_scores);
ad::Var lsgan_discriminator_loss(const ad::Var& real_scores, const ad::Var& fake_scores);

} // namespace voxelcore
} // namespace atlasgen

#pragma once

#include <json.hpp>

#include "atlasgen/optim.hpp"
#include "atlasgen/voxelcore.hpp"

namespace atlasgen {
namespace flow {

using voxelcore::FlowField;
using voxelcore::SegmentationMap;
using voxelcore::Volume;

// U-shaped registration network: concat(moving the paper calls I_m, fixed I_f)
// in, 3-channel displacement out. The final conv is zero-initialized so the
// untrained model is the identity transform.
struct FlowModelConfig {
    std::vector<int> enc_channels = {16, 32, 32, 32}; // stride-2 per level
    std::vector<int> dec_channels = {32, 32, 32, 16}; // one per upsampling step
    bool half_res_flow = false; // predict at half resolution, upsample x2
    real leaky = 0.2;

    int levels() const { return static_cast<int>(enc_channels.size()); }
    int downsample_factor() const { return 1 << levels(); }
    nlohmann::json to_json() const;
    static FlowModelConfig from_json(const nlohmann::json& j);
};

class FlowModel {
public:
    FlowModel() = default;
    FlowModel(const FlowModelConfig& cfg, Rng& rng);

    // moving, fixed: [N,1,D,H,W] -> flow [N,3,D,H,W]
    ad::Var forward(const ad::Var& moving, const ad::Var& fixed) const;

    const FlowModelConfig& config() const { return cfg_; }
    void collect(ad::ParamMap& pm, const std::string& prefix = "flow") const;
    std::vector<ad::Var> parameters() const;
    void copy_from(const FlowModel& other);

private:
    FlowModelConfig cfg_;
    std::vector<ad::Conv3dLayer> enc_;
    std::vector<ad::Conv3dLayer> dec_;
    ad::Conv3dLayer refine_;
    ad::Conv3dLayer head_;
};

// delta_p = F(I_m, I_f); evaluation-mode convenience over single volumes.
FlowField predict_flow(const FlowModel& model, const Volume& moving, const Volume& fixed);

// ssim_l1(t, warp(s_tilde, F(s_tilde, t))) — the reconstruction half of the
// flow objective. Differentiable form used by the joint trainer.
ad::Var flow_recon_loss(const ad::Var& s_tilde, const ad::Var& t, const FlowModel& model,
                        const voxelcore::SsimOptions& ssim = {});
real flow_recon_loss(const Volume& s_tilde, const Volume& t, const FlowModel& model,
                     const voxelcore::SsimOptions& ssim = {});

// warp_labels(base_seg, F(base, target)).
SegmentationMap register_and_transfer(const FlowModel& model, const Volume& base,
                                      const SegmentationMap& base_seg, const Volume& target);

struct PretrainStepResult {
    real loss = 0.0;
    real ncc = 0.0;
    real smooth = 0.0;
};

// One optimizer step of NCC + smoothness on a (moving, fixed) batch; the
// pre-training used for the positive-key transformer.
PretrainStepResult pretrain_T_step(FlowModel& model, ad::Adam& opt, const Tensor& moving,
                                   const Tensor& fixed, int ncc_window, real smooth_weight);

} // namespace flow
} // namespace atlasgen

#include "atlasgen/flow.hpp"

#include <cmath>

namespace atlasgen {
namespace flow {

using namespace ad;

nlohmann::json FlowModelConfig::to_json() const {
    return {{"enc_channels", enc_channels},
            {"dec_channels", dec_channels},
            {"half_res_flow", half_res_flow},
            {"leaky", leaky}};
}

FlowModelConfig FlowModelConfig::from_json(const nlohmann::json& j) {
    FlowModelConfig c;
    c.enc_channels = j.at("enc_channels").get<std::vector<int>>();
    c.dec_channels = j.at("dec_channels").get<std::vector<int>>();
    c.half_res_flow = j.at("half_res_flow").get<bool>();
    c.leaky = j.at("leaky").get<real>();
    return c;
}

FlowModel::FlowModel(const FlowModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    check(!cfg.enc_channels.empty() && cfg.dec_channels.size() == cfg.enc_channels.size(),
          "FlowModelConfig: dec_channels must mirror enc_channels");
    int cin = 2;
    for (int ch : cfg.enc_channels) {
        enc_.emplace_back(rng, cin, ch, 3, 2, 1);
        cin = ch;
    }
    // Decoder: upsample + skip concat per level; the last entry refines at the
    // finest decoded resolution.
    const int L = cfg.levels();
    int h = cfg.enc_channels.back();
    for (int i = 0; i < L - 1; ++i) {
        const int skip = cfg.enc_channels[static_cast<size_t>(L - 2 - i)];
        dec_.emplace_back(rng, h + skip, cfg.dec_channels[static_cast<size_t>(i)], 3, 1, 1);
        h = cfg.dec_channels[static_cast<size_t>(i)];
    }
    if (cfg.half_res_flow) {
        refine_ = Conv3dLayer(rng, h, cfg.dec_channels.back(), 3, 1, 1);
    } else {
        // One more upsample back to full resolution with the input as skip.
        refine_ = Conv3dLayer(rng, h + 2, cfg.dec_channels.back(), 3, 1, 1);
    }
    head_ = Conv3dLayer(rng, cfg.dec_channels.back(), 3, 3, 1, 1);
    head_.zero_init();
}

Var FlowModel::forward(const Var& moving, const Var& fixed) const {
    require_same_shape(moving.value(), fixed.value(), "FlowModel");
    const auto& s = moving.shape();
    check(s.size() == 5 && s[1] == 1, "FlowModel expects [N,1,D,H,W] inputs");
    const int f = cfg_.downsample_factor();
    check(s[2] % f == 0 && s[3] % f == 0 && s[4] % f == 0,
          "FlowModel: spatial dims " + shape_str(s) + " must be divisible by " + std::to_string(f));
    Var input = concat_channels(moving, fixed);
    std::vector<Var> skips;
    Var h = input;
    for (const auto& layer : enc_) {
        h = leaky_relu(layer.forward(h), cfg_.leaky);
        skips.push_back(h);
    }
    const int L = cfg_.levels();
    for (int i = 0; i < L - 1; ++i) {
        h = upsample_nearest2(h);
        h = concat_channels(h, skips[static_cast<size_t>(L - 2 - i)]);
        h = leaky_relu(dec_[static_cast<size_t>(i)].forward(h), cfg_.leaky);
    }
    if (cfg_.half_res_flow) {
        h = leaky_relu(refine_.forward(h), cfg_.leaky);
        Var half_flow = head_.forward(h);
        // Displacements are in voxel units of the half grid; double them.
        return mul_scalar(upsample_trilinear2(half_flow), 2.0);
    }
    h = upsample_nearest2(h);
    h = concat_channels(h, input);
    h = leaky_relu(refine_.forward(h), cfg_.leaky);
    return head_.forward(h);
}

void FlowModel::collect(ad::ParamMap& pm, const std::string& prefix) const {
    for (size_t i = 0; i < enc_.size(); ++i) enc_[i].collect(pm, prefix + ".enc" + std::to_string(i));
    for (size_t i = 0; i < dec_.size(); ++i) dec_[i].collect(pm, prefix + ".dec" + std::to_string(i));
    refine_.collect(pm, prefix + ".refine");
    head_.collect(pm, prefix + ".head");
}

std::vector<Var> FlowModel::parameters() const {
    ParamMap pm;
    collect(pm);
    std::vector<Var> out;
    for (auto& [n, v] : pm.items) out.push_back(v);
    return out;
}

void FlowModel::copy_from(const FlowModel& other) {
    ParamMap a, b;
    collect(a);
    other.collect(b);
    check(a.items.size() == b.items.size(), "FlowModel::copy_from: structure mismatch");
    for (size_t i = 0; i < a.items.size(); ++i) {
        require_same_shape(a.items[i].second.value(), b.items[i].second.value(),
                           "FlowModel::copy_from");
        a.items[i].second.node()->value = b.items[i].second.value();
    }
}

FlowField predict_flow(const FlowModel& model, const Volume& moving, const Volume& fixed) {
    require_same_shape(moving.data, fixed.data, "predict_flow");
    NoGradGuard ng;
    Var out = model.forward(constant(voxelcore::volume_batch(moving)),
                            constant(voxelcore::volume_batch(fixed)));
    check(out.value().all_finite(), "predict_flow produced non-finite displacements");
    return voxelcore::flow_from_batch(out.value());
}

Var flow_recon_loss(const Var& s_tilde, const Var& t, const FlowModel& model,
                    const voxelcore::SsimOptions& ssim) {
    Var delta = model.forward(s_tilde, t);
    Var warped = warp3d(s_tilde, delta, WarpMode::Trilinear);
    return voxelcore::ssim_l1_loss(t, warped, ssim);
}

real flow_recon_loss(const Volume& s_tilde, const Volume& t, const FlowModel& model,
                     const voxelcore::SsimOptions& ssim) {
    NoGradGuard ng;
    return flow_recon_loss(constant(voxelcore::volume_batch(s_tilde)),
                           constant(voxelcore::volume_batch(t)), model, ssim)
        .item();
}

SegmentationMap register_and_transfer(const FlowModel& model, const Volume& base,
                                      const SegmentationMap& base_seg, const Volume& target) {
    check(base.data.shape == base_seg.labels.shape,
          "register_and_transfer: base volume and labels are misaligned");
    FlowField delta = predict_flow(model, base, target);
    return voxelcore::warp_labels(base_seg, delta);
}

PretrainStepResult pretrain_T_step(FlowModel& model, Adam& opt, const Tensor& moving,
                                   const Tensor& fixed, int ncc_window, real smooth_weight) {
    Var mv = constant(moving);
    Var fx = constant(fixed);
    Var delta = model.forward(mv, fx);
    Var warped = warp3d(mv, delta, WarpMode::Trilinear);
    Var ncc = voxelcore::ncc_loss(warped, fx, ncc_window);
    Var smooth = flow_grad_l1(delta);
    Var loss = add(ncc, mul_scalar(smooth, smooth_weight));
    PretrainStepResult res;
    res.loss = loss.item();
    res.ncc = ncc.item();
    res.smooth = smooth.item();
    if (!std::isfinite(res.loss))
        throw NumericalError("pretrain_T_step: non-finite loss (ncc=" + std::to_string(res.ncc) +
                             ", smooth=" + std::to_string(res.smooth) + ")");
    opt.zero_grad();
    backward(loss);
    opt.step();
    return res;
}

} // namespace flow
} // namespace atlasgen

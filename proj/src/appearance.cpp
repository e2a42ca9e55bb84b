#include "atlasgen/appearance.hpp"

namespace atlasgen {
namespace appearance {

using namespace ad;

nlohmann::json AppearanceConfig::to_json() const {
    return {{"enc_channels", enc_channels},
            {"n_res", n_res},
            {"style_dim", style_dim},
            {"leaky", leaky}};
}

AppearanceConfig AppearanceConfig::from_json(const nlohmann::json& j) {
    AppearanceConfig c;
    c.enc_channels = j.at("enc_channels").get<std::vector<int>>();
    c.n_res = j.at("n_res").get<int>();
    c.style_dim = j.at("style_dim").get<int>();
    c.leaky = j.at("leaky").get<real>();
    return c;
}

AppearanceModel::AppearanceModel(const AppearanceConfig& cfg, Rng& rng) : cfg_(cfg) {
    check(cfg.enc_channels.size() == 2, "AppearanceConfig: exactly two encoder blocks");
    const int c1 = cfg.enc_channels[0], c2 = cfg.enc_channels[1];
    enc_.emplace_back(rng, 1, c1, 3, 2, 1);
    enc_.emplace_back(rng, c1, c2, 3, 2, 1);
    for (int i = 0; i < cfg.n_res; ++i) {
        ResBlock b;
        b.conv1 = Conv3dLayer(rng, c2, c2, 3, 1, 1);
        b.conv2 = Conv3dLayer(rng, c2, c2, 3, 1, 1);
        b.mapper = LinearLayer(rng, cfg.style_dim, 2 * c2);
        // gamma starts at one, beta at zero.
        for (int c = 0; c < c2; ++c) b.mapper.b.mutable_value().data[static_cast<size_t>(c)] = 1.0;
        res_.push_back(std::move(b));
    }
    const int dec2 = std::max(c1 / 2, 2);
    dec_.emplace_back(rng, c2, c1, 3, 1, 1);
    dec_.emplace_back(rng, c1, dec2, 3, 1, 1);
    out_ = Conv3dLayer(rng, dec2, 1, 3, 1, 1);
}

Var AppearanceModel::forward(const Var& source, const Var& style) const {
    const auto& s = source.shape();
    check(s.size() == 5 && s[1] == 1, "AppearanceModel expects [N,1,D,H,W]");
    check(style.shape() == std::vector<int>({s[0], cfg_.style_dim}),
          "AppearanceModel: style must be [N," + std::to_string(cfg_.style_dim) + "]");
    const int f = cfg_.downsample_factor();
    if (s[2] % f != 0 || s[3] % f != 0 || s[4] % f != 0)
        throw ShapeError("AppearanceModel: spatial dims " + shape_str(s) +
                         " must be divisible by " + std::to_string(f));
    Var h = source;
    for (const auto& conv : enc_) h = leaky_relu(instance_norm(conv.forward(h)), cfg_.leaky);
    const int c2 = cfg_.enc_channels[1];
    for (const auto& block : res_) {
        Var gb = block.mapper.forward(style);          // [N, 2*c2]
        Var gamma = slice_cols(gb, 0, c2);
        Var beta = slice_cols(gb, c2, c2);
        Var r = block.conv1.forward(h);
        r = leaky_relu(adain(r, gamma, beta), cfg_.leaky);
        r = block.conv2.forward(r);
        h = add(h, r);
    }
    for (const auto& conv : dec_) {
        h = upsample_nearest2(h);
        h = leaky_relu(instance_norm(conv.forward(h)), cfg_.leaky);
    }
    return sigmoid(out_.forward(h));
}

void AppearanceModel::collect(ad::ParamMap& pm, const std::string& prefix) const {
    for (size_t i = 0; i < enc_.size(); ++i) enc_[i].collect(pm, prefix + ".enc" + std::to_string(i));
    for (size_t i = 0; i < res_.size(); ++i) {
        res_[i].conv1.collect(pm, prefix + ".res" + std::to_string(i) + ".conv1");
        res_[i].conv2.collect(pm, prefix + ".res" + std::to_string(i) + ".conv2");
        res_[i].mapper.collect(pm, prefix + ".res" + std::to_string(i) + ".adain");
    }
    for (size_t i = 0; i < dec_.size(); ++i) dec_[i].collect(pm, prefix + ".dec" + std::to_string(i));
    out_.collect(pm, prefix + ".out");
}

std::vector<Var> AppearanceModel::parameters() const {
    ParamMap pm;
    collect(pm);
    std::vector<Var> out;
    for (auto& [n, v] : pm.items) out.push_back(v);
    return out;
}

Volume apply_style(const AppearanceModel& model, const Volume& source, const StyleCode& style) {
    NoGradGuard ng;
    Tensor st({1, model.config().style_dim});
    check(style.vector.numel() == model.config().style_dim,
          "apply_style: style code length mismatch");
    std::copy_n(style.vector.ptr(), style.vector.numel(), st.ptr());
    Var out = model.forward(constant(voxelcore::volume_batch(source)), constant(std::move(st)));
    Volume res = voxelcore::volume_from_batch(out.value(), 0, source.meta);
    return res;
}

Var style_cycle_loss(const Var& s, const Var& s_tilde, const AppearanceModel& model,
                     const Var& style_of_s, const voxelcore::SsimOptions& ssim) {
    Var back = model.forward(s_tilde, style_of_s);
    return voxelcore::ssim_l1_loss(s, back, ssim);
}

real style_cycle_loss(const Volume& s, const Volume& s_tilde, const AppearanceModel& model,
                      const StyleEncoder& encoder, const voxelcore::SsimOptions& ssim) {
    NoGradGuard ng;
    Var sv = constant(voxelcore::volume_batch(s));
    Var code = encoder.forward(sv);
    return style_cycle_loss(sv, constant(voxelcore::volume_batch(s_tilde)), model, code, ssim).item();
}

Var style_identity_loss(const Var& s, const AppearanceModel& model, const Var& style_of_s,
                        const voxelcore::SsimOptions& ssim) {
    Var out = model.forward(s, style_of_s);
    return voxelcore::ssim_l1_loss(s, out, ssim);
}

real style_identity_loss(const Volume& s, const AppearanceModel& model,
                         const StyleEncoder& encoder, const voxelcore::SsimOptions& ssim) {
    NoGradGuard ng;
    Var sv = constant(voxelcore::volume_batch(s));
    Var code = encoder.forward(sv);
    return style_identity_loss(sv, model, code, ssim).item();
}

} // namespace appearance
} // namespace atlasgen

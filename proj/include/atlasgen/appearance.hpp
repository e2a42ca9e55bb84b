#pragma once

#include <json.hpp>

#include "atlasgen/style.hpp"
#include "atlasgen/voxelcore.hpp"

namespace atlasgen {
namespace appearance {

using style::StyleCode;
using style::StyleEncoder;
using voxelcore::Volume;

// Style-conditioned image-to-image network: two stride-2 encoder blocks, three
// residual blocks each carrying one AdaIN layer, two upsample+conv decoder
// blocks, sigmoid output. Per-layer (gamma, beta) come from one linear mapper
// per AdaIN layer.
struct AppearanceConfig {
    std::vector<int> enc_channels = {32, 64}; // two stride-2 blocks
    int n_res = 3;                            // one AdaIN layer per block
    int style_dim = 128;
    real leaky = 0.2;

    int downsample_factor() const { return 1 << static_cast<int>(enc_channels.size()); }
    nlohmann::json to_json() const;
    static AppearanceConfig from_json(const nlohmann::json& j);
};

class AppearanceModel {
public:
    AppearanceModel() = default;
    AppearanceModel(const AppearanceConfig& cfg, Rng& rng);

    // source [N,1,D,H,W], style [N,style_dim] -> [N,1,D,H,W] in [0,1]
    ad::Var forward(const ad::Var& source, const ad::Var& style) const;

    const AppearanceConfig& config() const { return cfg_; }
    void collect(ad::ParamMap& pm, const std::string& prefix = "appearance") const;
    std::vector<ad::Var> parameters() const;

private:
    AppearanceConfig cfg_;
    std::vector<ad::Conv3dLayer> enc_;
    struct ResBlock {
        ad::Conv3dLayer conv1, conv2;
        ad::LinearLayer mapper; // style -> (gamma, beta)
    };
    std::vector<ResBlock> res_;
    std::vector<ad::Conv3dLayer> dec_;
    ad::Conv3dLayer out_;
};

// s_tilde = A(s, style); evaluation-mode convenience.
Volume apply_style(const AppearanceModel& model, const Volume& source, const StyleCode& style);

// ssim_l1(s, A(s_tilde, E(s))) — style consistency through the return hop.
ad::Var style_cycle_loss(const ad::Var& s, const ad::Var& s_tilde, const AppearanceModel& model,
                         const ad::Var& style_of_s, const voxelcore::SsimOptions& ssim = {});
real style_cycle_loss(const Volume& s, const Volume& s_tilde, const AppearanceModel& model,
                      const StyleEncoder& encoder, const voxelcore::SsimOptions& ssim = {});

// ssim_l1(s, A(s, E(s))).
ad::Var style_identity_loss(const ad::Var& s, const AppearanceModel& model,
                            const ad::Var& style_of_s, const voxelcore::SsimOptions& ssim = {});
real style_identity_loss(const Volume& s, const AppearanceModel& model,
                         const StyleEncoder& encoder, const voxelcore::SsimOptions& ssim = {});

} // namespace appearance
} // namespace atlasgen

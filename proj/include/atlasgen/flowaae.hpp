#pragma once

#include <json.hpp>

#include "atlasgen/optim.hpp"
#include "atlasgen/style.hpp"
#include "atlasgen/voxelcore.hpp"

namespace atlasgen {
namespace flowaae {

using voxelcore::FlowField;

struct FlowCode {
    Tensor vector; // [dim]
};

// Adversarial autoencoder over the base image's flow fields: conv encoder to a
// Gaussian-matched latent, linear+conv decoder back to a [3,D,H,W] field, MLP
// latent discriminator.
struct FlowAaeConfig {
    std::vector<int> enc_channels = {32, 64, 128, 128}; // stride-2 blocks
    std::vector<int> dec_channels = {};                  // defaults to mirrored encoder
    int latent_dim = 64;
    std::vector<int> spatial_shape; // [D,H,W], fixed at training time
    std::vector<int> disc_hidden = {128, 128};
    real leaky = 0.2;

    int levels() const { return static_cast<int>(enc_channels.size()); }
    nlohmann::json to_json() const;
    static FlowAaeConfig from_json(const nlohmann::json& j);
};

class FlowAae {
public:
    FlowAae() = default;
    FlowAae(FlowAaeConfig cfg, Rng& rng);

    ad::Var encode(const ad::Var& flows) const;  // [N,3,D,H,W] -> [N,latent]
    ad::Var decode(const ad::Var& codes) const;  // [N,latent] -> [N,3,D,H,W]
    ad::Var discriminate(const ad::Var& codes) const; // [N,latent] -> [N]

    const FlowAaeConfig& config() const { return cfg_; }
    void collect_autoencoder(ad::ParamMap& pm, const std::string& prefix = "flow_aae") const;
    void collect_discriminator(ad::ParamMap& pm, const std::string& prefix = "flow_disc") const;
    std::vector<ad::Var> autoencoder_parameters() const;
    std::vector<ad::Var> discriminator_parameters() const;

private:
    FlowAaeConfig cfg_;
    std::vector<int> coarse_; // [D,H,W] / 2^levels
    std::vector<ad::Conv3dLayer> enc_;
    ad::LinearLayer to_latent_;
    ad::LinearLayer from_latent_;
    std::vector<ad::Conv3dLayer> dec_;
    ad::Conv3dLayer dec_head_;
    style::LatentDiscriminator disc_;
};

// Deterministic encode/decode over single flow fields; shapes are validated
// against the training shape recorded in the config.
FlowCode encode_flow(const FlowAae& aae, const FlowField& flow);
FlowField decode_flow(const FlowAae& aae, const FlowCode& code);

struct AaeStepResult {
    real recon_l1 = 0.0;
    real adv_gen = 0.0;
    real d_loss = 0.0;
    real total = 0.0; // recon + mu * adv_gen
};

// Alternating update: (a) discriminator on LS-GAN d-loss between N(0,I) samples
// ("real") and encoded flows ("fake"); (b) encoder+decoder on
// ||f - G(E(f))||_1 + mu * (D(E(f)) - 1)^2.
AaeStepResult aae_train_step(FlowAae& aae, ad::Adam& opt_ae, ad::Adam& opt_disc,
                             const Tensor& flow_batch, real mu, Rng& rng);

// (1 - alpha) * a + alpha * b; alpha outside [0,1] rejected.
FlowCode interpolate_codes(const FlowCode& a, const FlowCode& b, real alpha);

} // namespace flowaae
} // namespace atlasgen

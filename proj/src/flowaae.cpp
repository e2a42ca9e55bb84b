#include "atlasgen/flowaae.hpp"

#include <cmath>

namespace atlasgen {
namespace flowaae {

using namespace ad;

nlohmann::json FlowAaeConfig::to_json() const {
    return {{"enc_channels", enc_channels}, {"dec_channels", dec_channels},
            {"latent_dim", latent_dim},     {"spatial_shape", spatial_shape},
            {"disc_hidden", disc_hidden},   {"leaky", leaky}};
}

FlowAaeConfig FlowAaeConfig::from_json(const nlohmann::json& j) {
    FlowAaeConfig c;
    c.enc_channels = j.at("enc_channels").get<std::vector<int>>();
    c.dec_channels = j.at("dec_channels").get<std::vector<int>>();
    c.latent_dim = j.at("latent_dim").get<int>();
    c.spatial_shape = j.at("spatial_shape").get<std::vector<int>>();
    c.disc_hidden = j.at("disc_hidden").get<std::vector<int>>();
    c.leaky = j.at("leaky").get<real>();
    return c;
}

FlowAae::FlowAae(FlowAaeConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    check(cfg_.spatial_shape.size() == 3, "FlowAaeConfig: spatial_shape must be [D,H,W]");
    const int L = cfg_.levels();
    coarse_ = cfg_.spatial_shape;
    for (auto& d : coarse_) {
        check(d % (1 << L) == 0, "FlowAae: spatial shape " + shape_str(cfg_.spatial_shape) +
                                     " must be divisible by " + std::to_string(1 << L));
        d >>= L;
    }
    if (cfg_.dec_channels.empty()) {
        for (int i = L - 2; i >= 0; --i) cfg_.dec_channels.push_back(cfg_.enc_channels[static_cast<size_t>(i)]);
        cfg_.dec_channels.push_back(std::max(cfg_.enc_channels[0] / 2, 3));
    }
    check(static_cast<int>(cfg_.dec_channels.size()) == L,
          "FlowAaeConfig: dec_channels must have one entry per level");
    int cin = 3;
    for (int ch : cfg_.enc_channels) {
        enc_.emplace_back(rng, cin, ch, 3, 2, 1);
        cin = ch;
    }
    const int coarse_numel = coarse_[0] * coarse_[1] * coarse_[2];
    to_latent_ = LinearLayer(rng, cin * coarse_numel, cfg_.latent_dim);
    from_latent_ = LinearLayer(rng, cfg_.latent_dim, cin * coarse_numel);
    int h = cin;
    for (int ch : cfg_.dec_channels) {
        dec_.emplace_back(rng, h, ch, 3, 1, 1);
        h = ch;
    }
    dec_head_ = Conv3dLayer(rng, h, 3, 3, 1, 1);
    style::LatentDiscriminatorConfig dc;
    dc.in_dim = cfg_.latent_dim;
    dc.hidden = cfg_.disc_hidden;
    dc.leaky = cfg_.leaky;
    disc_ = style::LatentDiscriminator(dc, rng);
}

Var FlowAae::encode(const Var& flows) const {
    const auto& s = flows.shape();
    check(s.size() == 5 && s[1] == 3, "FlowAae::encode expects [N,3,D,H,W]");
    check(std::vector<int>(s.begin() + 2, s.end()) == cfg_.spatial_shape,
          "FlowAae::encode: flow shape " + shape_str(s) + " does not match training shape " +
              shape_str(cfg_.spatial_shape));
    Var h = flows;
    for (const auto& conv : enc_) h = leaky_relu(conv.forward(h), cfg_.leaky);
    const int N = s[0];
    h = reshape(h, {N, static_cast<int>(h.value().numel() / N)});
    return to_latent_.forward(h);
}

Var FlowAae::decode(const Var& codes) const {
    const auto& s = codes.shape();
    check(s.size() == 2 && s[1] == cfg_.latent_dim,
          "FlowAae::decode: codes must be [N," + std::to_string(cfg_.latent_dim) + "], got " +
              shape_str(s));
    const int N = s[0];
    Var h = leaky_relu(from_latent_.forward(codes), cfg_.leaky);
    h = reshape(h, {N, cfg_.enc_channels.back(), coarse_[0], coarse_[1], coarse_[2]});
    for (const auto& conv : dec_) {
        h = upsample_nearest2(h);
        h = leaky_relu(conv.forward(h), cfg_.leaky);
    }
    return dec_head_.forward(h);
}

Var FlowAae::discriminate(const Var& codes) const { return disc_.forward(codes); }

void FlowAae::collect_autoencoder(ad::ParamMap& pm, const std::string& prefix) const {
    for (size_t i = 0; i < enc_.size(); ++i) enc_[i].collect(pm, prefix + ".enc" + std::to_string(i));
    to_latent_.collect(pm, prefix + ".to_latent");
    from_latent_.collect(pm, prefix + ".from_latent");
    for (size_t i = 0; i < dec_.size(); ++i) dec_[i].collect(pm, prefix + ".dec" + std::to_string(i));
    dec_head_.collect(pm, prefix + ".head");
}

void FlowAae::collect_discriminator(ad::ParamMap& pm, const std::string& prefix) const {
    disc_.collect(pm, prefix);
}

std::vector<Var> FlowAae::autoencoder_parameters() const {
    ParamMap pm;
    collect_autoencoder(pm);
    std::vector<Var> out;
    for (auto& [n, v] : pm.items) out.push_back(v);
    return out;
}

std::vector<Var> FlowAae::discriminator_parameters() const {
    ParamMap pm;
    collect_discriminator(pm);
    std::vector<Var> out;
    for (auto& [n, v] : pm.items) out.push_back(v);
    return out;
}

FlowCode encode_flow(const FlowAae& aae, const FlowField& flow) {
    NoGradGuard ng;
    Var out = aae.encode(constant(voxelcore::flow_batch(flow)));
    FlowCode code;
    code.vector = Tensor({aae.config().latent_dim});
    std::copy_n(out.value().ptr(), code.vector.numel(), code.vector.ptr());
    return code;
}

FlowField decode_flow(const FlowAae& aae, const FlowCode& code) {
    check(code.vector.numel() == aae.config().latent_dim,
          "decode_flow: code length " + std::to_string(code.vector.numel()) + " != latent dim " +
              std::to_string(aae.config().latent_dim));
    NoGradGuard ng;
    Tensor c({1, aae.config().latent_dim});
    std::copy_n(code.vector.ptr(), code.vector.numel(), c.ptr());
    Var out = aae.decode(constant(std::move(c)));
    check(out.value().all_finite(), "decode_flow produced non-finite flow");
    return voxelcore::flow_from_batch(out.value());
}

AaeStepResult aae_train_step(FlowAae& aae, Adam& opt_ae, Adam& opt_disc, const Tensor& flow_batch,
                             real mu, Rng& rng) {
    if (mu < 0.0) throw UsageError("aae_train_step: mu must be non-negative");
    const int N = flow_batch.dim(0);
    AaeStepResult res;

    // (a) discriminator: prior samples are "real", encoded flows are "fake".
    {
        Var fake_codes;
        {
            NoGradGuard ng;
            fake_codes = aae.encode(constant(flow_batch));
        }
        Tensor prior({N, aae.config().latent_dim});
        for (auto& v : prior.data) v = rng.normal();
        Var d_real = aae.discriminate(constant(std::move(prior)));
        Var d_fake = aae.discriminate(constant(fake_codes.value()));
        Var d_loss = voxelcore::lsgan_discriminator_loss(d_real, d_fake);
        res.d_loss = d_loss.item();
        if (!std::isfinite(res.d_loss)) throw NumericalError("aae_train_step: non-finite d_loss");
        opt_disc.zero_grad();
        backward(d_loss);
        opt_disc.step();
    }

    // (b) encoder+decoder: L1 reconstruction plus the LS-GAN generator term.
    {
        Var f = constant(flow_batch);
        Var codes = aae.encode(f);
        Var recon = aae.decode(codes);
        Var l1 = mean(abs_(sub(recon, f)));
        Var adv = voxelcore::lsgan_generator_loss(aae.discriminate(codes));
        Var total = add(l1, mul_scalar(adv, mu));
        res.recon_l1 = l1.item();
        res.adv_gen = adv.item();
        res.total = total.item();
        if (!std::isfinite(res.total))
            throw NumericalError("aae_train_step: non-finite autoencoder loss (l1=" +
                                 std::to_string(res.recon_l1) + ")");
        opt_ae.zero_grad();
        backward(total);
        opt_ae.step();
    }
    return res;
}

FlowCode interpolate_codes(const FlowCode& a, const FlowCode& b, real alpha) {
    if (alpha < 0.0 || alpha > 1.0)
        throw UsageError("interpolate_codes: alpha must lie in [0,1], got " + std::to_string(alpha));
    check(a.vector.shape == b.vector.shape, "interpolate_codes: code length mismatch");
    FlowCode out;
    out.vector = Tensor(a.vector.shape);
    for (int64_t i = 0; i < out.vector.numel(); ++i)
        out.vector.data[static_cast<size_t>(i)] =
            (1.0 - alpha) * a.vector.data[static_cast<size_t>(i)] +
            alpha * b.vector.data[static_cast<size_t>(i)];
    return out;
}

} // namespace flowaae
} // namespace atlasgen

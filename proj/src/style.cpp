#include "atlasgen/style.hpp"

#include <cmath>

namespace atlasgen {
namespace style {

using namespace ad;

nlohmann::json StyleEncoderConfig::to_json() const {
    return {{"in_channels", in_channels},
            {"channels", channels},
            {"style_dim", style_dim},
            {"leaky", leaky}};
}

StyleEncoderConfig StyleEncoderConfig::from_json(const nlohmann::json& j) {
    StyleEncoderConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.channels = j.at("channels").get<std::vector<int>>();
    c.style_dim = j.at("style_dim").get<int>();
    c.leaky = j.at("leaky").get<real>();
    return c;
}

StyleEncoder::StyleEncoder(const StyleEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    int cin = cfg.in_channels;
    for (int ch : cfg.channels) {
        convs_.emplace_back(rng, cin, ch, 3, 2, 1);
        cin = ch;
    }
    head_ = LinearLayer(rng, cin, cfg.style_dim);
}

Var StyleEncoder::forward(const Var& images) const {
    const auto& s = images.shape();
    check(s.size() == 5 && s[1] == cfg_.in_channels, "StyleEncoder expects [N,1,D,H,W]");
    const int f = cfg_.downsample_factor();
    if (s[2] % f != 0 || s[3] % f != 0 || s[4] % f != 0)
        throw ShapeError("StyleEncoder: spatial dims " + shape_str(s) +
                         " must be divisible by the total downsampling factor " + std::to_string(f));
    Var h = images;
    for (const auto& conv : convs_) h = leaky_relu(instance_norm(conv.forward(h)), cfg_.leaky);
    return head_.forward(global_avg_pool(h));
}

void StyleEncoder::collect(ad::ParamMap& pm, const std::string& prefix) const {
    for (size_t i = 0; i < convs_.size(); ++i)
        convs_[i].collect(pm, prefix + ".conv" + std::to_string(i));
    head_.collect(pm, prefix + ".head");
}

std::vector<Var> StyleEncoder::parameters() const {
    ParamMap pm;
    collect(pm);
    std::vector<Var> out;
    for (auto& [n, v] : pm.items) out.push_back(v);
    return out;
}

void StyleEncoder::copy_from(const StyleEncoder& other) {
    ParamMap a, b;
    collect(a);
    other.collect(b);
    check(a.items.size() == b.items.size(), "StyleEncoder::copy_from: structure mismatch");
    for (size_t i = 0; i < a.items.size(); ++i) {
        require_same_shape(a.items[i].second.value(), b.items[i].second.value(),
                           "StyleEncoder::copy_from");
        a.items[i].second.node()->value = b.items[i].second.value();
    }
}

StyleCode encode_style(const StyleEncoder& enc, const Volume& image, const std::string& source_id) {
    NoGradGuard ng;
    Var out = enc.forward(constant(voxelcore::volume_batch(image)));
    StyleCode code;
    code.vector = Tensor({enc.config().style_dim});
    std::copy_n(out.value().ptr(), code.vector.numel(), code.vector.ptr());
    code.source_id = source_id;
    return code;
}

std::vector<StyleCode> encode_style(const StyleEncoder& enc,
                                    const std::vector<const Volume*>& images) {
    NoGradGuard ng;
    Var out = enc.forward(constant(voxelcore::volume_batch(images)));
    std::vector<StyleCode> codes(images.size());
    const int dim = enc.config().style_dim;
    for (size_t n = 0; n < images.size(); ++n) {
        codes[n].vector = Tensor({dim});
        std::copy_n(out.value().ptr() + static_cast<int64_t>(n) * dim, dim, codes[n].vector.ptr());
    }
    return codes;
}

// ------------------------------------------------------------------ KeyQueue

void KeyQueue::push(const Tensor& keys) {
    check(keys.ndim() == 2 && keys.dim(1) == dim_,
          "KeyQueue::push expects [N," + std::to_string(dim_) + "], got " + shape_str(keys.shape));
    for (int n = 0; n < keys.dim(0); ++n) {
        std::vector<real> row(static_cast<size_t>(dim_));
        std::copy_n(keys.ptr() + static_cast<int64_t>(n) * dim_, dim_, row.data());
        keys_.push_back(std::move(row));
        if (static_cast<int>(keys_.size()) > capacity_) keys_.pop_front();
    }
}

Tensor KeyQueue::as_matrix() const {
    check(!keys_.empty(), "KeyQueue is empty");
    Tensor out({static_cast<int>(keys_.size()), dim_});
    for (size_t n = 0; n < keys_.size(); ++n)
        std::copy_n(keys_[n].data(), dim_, out.ptr() + static_cast<int64_t>(n) * dim_);
    return out;
}

Tensor KeyQueue::serialize() const {
    if (keys_.empty()) return Tensor({1, dim_ + 1}, 0.0); // sentinel: zero rows
    Tensor out({static_cast<int>(keys_.size()), dim_ + 1}, 1.0);
    for (size_t n = 0; n < keys_.size(); ++n)
        std::copy_n(keys_[n].data(), dim_, out.ptr() + static_cast<int64_t>(n) * (dim_ + 1) + 1);
    return out;
}

KeyQueue KeyQueue::deserialize(const Tensor& t, int capacity) {
    check(t.ndim() == 2 && t.dim(1) >= 2, "KeyQueue::deserialize: bad tensor");
    KeyQueue q(capacity, t.dim(1) - 1);
    if (t.dim(0) == 1 && t.data[0] == 0.0) return q; // sentinel
    Tensor rows({t.dim(0), q.dim_});
    for (int n = 0; n < t.dim(0); ++n)
        std::copy_n(t.ptr() + static_cast<int64_t>(n) * (q.dim_ + 1) + 1, q.dim_,
                    rows.ptr() + static_cast<int64_t>(n) * q.dim_);
    q.push(rows);
    return q;
}

void enqueue_keys(KeyQueue& queue, const Tensor& new_keys) { queue.push(new_keys); }

void enqueue_keys(KeyQueue& queue, const std::vector<Tensor>& new_keys) {
    for (const auto& k : new_keys) {
        if (k.ndim() == 1) {
            Tensor row({1, k.dim(0)}, k.data);
            queue.push(row);
        } else {
            queue.push(k);
        }
    }
}

// ---------------------------------------------------------------- contrastive

Var contrastive_loss(const Var& q, const Var& k_pos, const KeyQueue& queue, real tau) {
    if (tau <= 0.0) throw UsageError("contrastive_loss: temperature must be positive");
    check(!queue.empty(), "contrastive_loss: key queue is empty");
    require_same_shape(q.value(), k_pos.value(), "contrastive_loss");
    check(q.shape().size() == 2 && q.shape()[1] == queue.dim(),
          "contrastive_loss: codes [N,dim] must match queue dim " + std::to_string(queue.dim()));
    const real inv_tau = 1.0 / tau;
    Var pos = mul_scalar(rows_dot(q, k_pos), inv_tau);                   // [N]
    Var bank = constant(queue.as_matrix());                              // negatives are detached
    Var negs = mul_scalar(linear(q, bank, Var()), inv_tau);              // [N,K]
    const int N = q.shape()[0];
    Var logits = concat_cols(reshape(pos, {N, 1}), negs);                // [N,1+K]
    Var lse = log_sum_exp_rows(logits);                                  // [N]
    return mean(sub(lse, pos));
}

void momentum_update(const StyleEncoder& query, StyleEncoder& key, real m) {
    check(m >= 0.0 && m <= 1.0, "momentum_update: m must lie in [0,1]");
    ParamMap qp, kp;
    query.collect(qp);
    key.collect(kp);
    check(qp.items.size() == kp.items.size(), "momentum_update: parameter structure mismatch");
    for (size_t i = 0; i < qp.items.size(); ++i) {
        const Tensor& qv = qp.items[i].second.value();
        Tensor& kv = kp.items[i].second.node()->value;
        require_same_shape(qv, kv, "momentum_update");
        for (int64_t j = 0; j < qv.numel(); ++j)
            kv.data[static_cast<size_t>(j)] =
                m * kv.data[static_cast<size_t>(j)] + (1.0 - m) * qv.data[static_cast<size_t>(j)];
    }
}

Volume generate_positive_key(const Volume& query, const Volume& random_target,
                             const flow::FlowModel& pretrained_t, bool t_is_trained) {
    if (!t_is_trained)
        throw DataError("generate_positive_key: spatial transformer checkpoint is not trained");
    require_same_shape(query.data, random_target.data, "generate_positive_key");
    voxelcore::FlowField delta = flow::predict_flow(pretrained_t, query, random_target);
    return voxelcore::warp_volume(query, delta);
}

// -------------------------------------------------------------- discriminator

nlohmann::json LatentDiscriminatorConfig::to_json() const {
    return {{"in_dim", in_dim}, {"hidden", hidden}, {"leaky", leaky}};
}

LatentDiscriminatorConfig LatentDiscriminatorConfig::from_json(const nlohmann::json& j) {
    LatentDiscriminatorConfig c;
    c.in_dim = j.at("in_dim").get<int>();
    c.hidden = j.at("hidden").get<std::vector<int>>();
    c.leaky = j.at("leaky").get<real>();
    return c;
}

LatentDiscriminator::LatentDiscriminator(const LatentDiscriminatorConfig& cfg, Rng& rng)
    : cfg_(cfg) {
    int in = cfg.in_dim;
    for (int h : cfg.hidden) {
        layers_.emplace_back(rng, in, h);
        in = h;
    }
    layers_.emplace_back(rng, in, 1);
}

Var LatentDiscriminator::forward(const Var& codes) const {
    check(codes.shape().size() == 2 && codes.shape()[1] == cfg_.in_dim,
          "LatentDiscriminator expects [N," + std::to_string(cfg_.in_dim) + "]");
    Var h = codes;
    for (size_t i = 0; i + 1 < layers_.size(); ++i)
        h = leaky_relu(layers_[i].forward(h), cfg_.leaky);
    Var out = layers_.back().forward(h); // [N,1]
    return reshape(out, {codes.shape()[0]});
}

void LatentDiscriminator::collect(ad::ParamMap& pm, const std::string& prefix) const {
    for (size_t i = 0; i < layers_.size(); ++i)
        layers_[i].collect(pm, prefix + ".fc" + std::to_string(i));
}

std::vector<Var> LatentDiscriminator::parameters() const {
    ParamMap pm;
    collect(pm, "d");
    std::vector<Var> out;
    for (auto& [n, v] : pm.items) out.push_back(v);
    return out;
}

} // namespace style
} // namespace atlasgen

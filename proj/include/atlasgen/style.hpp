#pragma once

#include <deque>
#include <json.hpp>
#include <string>

#include "atlasgen/flow.hpp"
#include "atlasgen/optim.hpp"
#include "atlasgen/voxelcore.hpp"

namespace atlasgen {
namespace style {

using voxelcore::Volume;

// Fixed-length latent describing a volume's appearance.
struct StyleCode {
    Tensor vector; // [dim]
    std::string source_id;
};

struct StyleEncoderConfig {
    int in_channels = 1;
    std::vector<int> channels = {16, 32, 64, 128, 256}; // stride-2 conv blocks
    int style_dim = 128;
    real leaky = 0.2;

    int downsample_factor() const { return 1 << static_cast<int>(channels.size()); }
    nlohmann::json to_json() const;
    static StyleEncoderConfig from_json(const nlohmann::json& j);
};

// 3D conv stack with instance norm and leaky activations, global average pool,
// linear head to the style dimension.
class StyleEncoder {
public:
    StyleEncoder() = default;
    StyleEncoder(const StyleEncoderConfig& cfg, Rng& rng);

    ad::Var forward(const ad::Var& images) const; // [N,1,D,H,W] -> [N,dim]

    const StyleEncoderConfig& config() const { return cfg_; }
    void collect(ad::ParamMap& pm, const std::string& prefix = "style_enc") const;
    std::vector<ad::Var> parameters() const;
    void copy_from(const StyleEncoder& other); // key encoder starts as a copy

private:
    StyleEncoderConfig cfg_;
    std::vector<ad::Conv3dLayer> convs_;
    ad::LinearLayer head_;
};

// Deterministic eval-mode encoding (no tape).
StyleCode encode_style(const StyleEncoder& enc, const Volume& image,
                       const std::string& source_id = "");
std::vector<StyleCode> encode_style(const StyleEncoder& enc,
                                    const std::vector<const Volume*>& images);

// FIFO ring of unit-norm key codes; single-writer (the training loop).
class KeyQueue {
public:
    KeyQueue() = default;
    KeyQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
        check(capacity > 0 && dim > 0, "KeyQueue needs positive capacity and dim");
    }

    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int size() const { return static_cast<int>(keys_.size()); }
    bool empty() const { return keys_.empty(); }

    // rows of [N,dim]; oldest evicted first once full
    void push(const Tensor& keys);
    Tensor as_matrix() const; // [size,dim]

    Tensor serialize() const;
    static KeyQueue deserialize(const Tensor& t, int capacity);

private:
    int capacity_ = 0;
    int dim_ = 0;
    std::deque<std::vector<real>> keys_;
};

void enqueue_keys(KeyQueue& queue, const Tensor& new_keys);
void enqueue_keys(KeyQueue& queue, const std::vector<Tensor>& new_keys); // may be empty

// -log( exp(q.k+ / tau) / sum_i exp(q.k_i / tau) ), negatives from the queue.
// q, k_pos: [N,dim], expected unit-norm (the trainer normalizes).
ad::Var contrastive_loss(const ad::Var& q, const ad::Var& k_pos, const KeyQueue& queue, real tau);

// theta_k <- m * theta_k + (1 - m) * theta_q, elementwise over both encoders.
void momentum_update(const StyleEncoder& query, StyleEncoder& key, real m);

// k+ = T(q): warp the query toward a randomly chosen target with the
// pre-trained spatial transformer; geometry changes, style is preserved.
Volume generate_positive_key(const Volume& query, const Volume& random_target,
                             const flow::FlowModel& pretrained_t, bool t_is_trained = true);

// MLP discriminator over style codes (LS-GAN on the N(0,I) prior).
struct LatentDiscriminatorConfig {
    int in_dim = 128;
    std::vector<int> hidden = {256, 256};
    real leaky = 0.2;
    nlohmann::json to_json() const;
    static LatentDiscriminatorConfig from_json(const nlohmann::json& j);
};

class LatentDiscriminator {
public:
    LatentDiscriminator() = default;
    LatentDiscriminator(const LatentDiscriminatorConfig& cfg, Rng& rng);
    ad::Var forward(const ad::Var& codes) const; // [N,dim] -> [N]
    const LatentDiscriminatorConfig& config() const { return cfg_; }
    void collect(ad::ParamMap& pm, const std::string& prefix) const;
    std::vector<ad::Var> parameters() const;

private:
    LatentDiscriminatorConfig cfg_;
    std::vector<ad::LinearLayer> layers_;
};

} // namespace style
} // namespace atlasgen

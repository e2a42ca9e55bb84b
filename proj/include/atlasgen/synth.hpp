#pragma once

#include <optional>
#include <string>

#include "atlasgen/appearance.hpp"
#include "atlasgen/flowaae.hpp"
#include "atlasgen/voxelcore.hpp"

namespace atlasgen {
namespace synth {

using voxelcore::SegmentationMap;
using voxelcore::Volume;

struct SampleOptions {
    real style_truncation = 3.0; // resample style coordinates beyond +-3 sigma; <=0 disables
};

struct GeneratedPair {
    Volume image;
    SegmentationMap labels;
    Tensor style_code; // [style_dim]
    Tensor flow_code;  // [latent_dim]
};

// X = warp(A(b, n_style), G(n_flow)); Y = warp_labels(b_seg, G(n_flow)).
// One flow sample drives both outputs.
GeneratedPair sample_pair(const Volume& base, const SegmentationMap& base_seg,
                          const appearance::AppearanceModel& appearance_model,
                          const flowaae::FlowAae& aae, Rng& rng, const SampleOptions& opts = {});

struct GenerateConfig {
    int count = 1850;
    uint64_t seed = 0;
    SampleOptions sample;
};

// Writes `count` image/label pairs plus a JSON-lines manifest. Pair RNG streams
// derive independently from (seed, index); the manifest is only written when
// every pair succeeded, and partial outputs are removed on failure.
// Returns the manifest path.
std::string generate_dataset(const GenerateConfig& cfg, const std::string& out_dir,
                             const Volume& base, const SegmentationMap& base_seg,
                             const appearance::AppearanceModel& appearance_model,
                             const flowaae::FlowAae& aae,
                             const std::string& appearance_ckpt_hash,
                             const std::string& aae_ckpt_hash);

struct GeneratedDataset {
    std::vector<Volume> images;
    std::vector<SegmentationMap> labels;
};
GeneratedDataset load_generated(const std::string& dir, int limit = 0, int num_classes = 0);

} // namespace synth
} // namespace atlasgen

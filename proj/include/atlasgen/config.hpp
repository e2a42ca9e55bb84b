#pragma once

#include <map>
#include <string>

#include "atlasgen/dataio.hpp"
#include "atlasgen/flowaae.hpp"
#include "atlasgen/segnet.hpp"
#include "atlasgen/synth.hpp"
#include "atlasgen/trainer.hpp"

namespace atlasgen {
namespace config {

// Whole-pipeline configuration: optimization schedule plus the network specs
// and per-phase sections. Serialized as an INI-style key=value file with one
// section per block; the CLI echoes the effective config into each run
// directory.
struct PipelineConfig {
    uint64_t split_seed = 0;

    trainer::TrainConfig train;
    style::StyleEncoderConfig style_enc;
    style::LatentDiscriminatorConfig style_disc;
    appearance::AppearanceConfig appearance;
    flow::FlowModelConfig t_model;
    flow::FlowModelConfig flow_model;
    flowaae::FlowAaeConfig aae;
    segnet::UnetConfig unet; // num_classes 0 = take from the cohort
    segnet::UnetTrainConfig unet_train;
    voxelcore::SsimOptions ssim;
    synth::GenerateConfig generate;

    int phantom_patients = 20;
    int phantom_families = 3;
    real phantom_spread = 2.5;
    dataio::PhantomOptions phantom;

    // Paper-scale defaults (the constructor values).
    static PipelineConfig full_defaults() { return PipelineConfig(); }
    // Small networks and budgets sized for a single CPU core.
    static PipelineConfig desk_defaults();
};

// Parse `key = value` under `[section]` headers; unknown keys are rejected.
PipelineConfig parse_config_text(const std::string& text, PipelineConfig base);
PipelineConfig load_config(const std::string& path, PipelineConfig base);

// Apply "section.key=value" overrides (CLI flags win over the file).
void apply_override(PipelineConfig& cfg, const std::string& spec);

// Deterministic full echo of every field.
std::string config_text(const PipelineConfig& cfg);
void write_config(const std::string& path, const PipelineConfig& cfg);

} // namespace config
} // namespace atlasgen

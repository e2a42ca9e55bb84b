#pragma once

#include <json.hpp>

#include "atlasgen/checkpoint.hpp"
#include "atlasgen/optim.hpp"
#include "atlasgen/voxelcore.hpp"

namespace atlasgen {
namespace segnet {

using voxelcore::SegmentationMap;
using voxelcore::Volume;

struct UnetConfig {
    int levels = 4;
    int base_channels = 16;
    int num_classes = 5;
    int stem_stride = 1; // 2 = work at half resolution, upsample the logits

    nlohmann::json to_json() const;
    static UnetConfig from_json(const nlohmann::json& j);
    int downsample_factor() const { return stem_stride << (levels - 1); }
};

class Unet {
public:
    Unet() = default;
    Unet(const UnetConfig& cfg, Rng& rng);

    ad::Var forward(const ad::Var& images) const; // [N,1,D,H,W] -> logits [N,C,D,H,W]

    const UnetConfig& config() const { return cfg_; }
    void collect(ad::ParamMap& pm, const std::string& prefix = "unet") const;
    std::vector<ad::Var> parameters() const;

private:
    UnetConfig cfg_;
    std::vector<ad::Conv3dLayer> down_;   // stride-2 (or stem) per level
    std::vector<ad::Conv3dLayer> refine_; // one per level
    std::vector<ad::Conv3dLayer> up_;     // decoder convs after skip concat
    ad::Conv3dLayer head_;                // 1x1x1 to classes
};

// Argmax labels + per-class probabilities (softmax over channels). Volumes
// larger than `patch` are processed by sliding windows with averaged logits.
struct SegmentResult {
    SegmentationMap labels;
    Tensor probabilities; // [C,D,H,W]
};
SegmentResult unet_segment(const Unet& model, const Volume& image,
                           std::array<int, 3> patch = {0, 0, 0}); // 0 = whole volume

struct UnetTrainConfig {
    int steps = 2000;
    real lr = 2e-4;
    int batch = 1;
    std::array<int, 3> patch = {64, 64, 64}; // clipped to the volume shape
    uint64_t seed = 0;
    int val_every = 200;  // best-checkpoint cadence (when val pairs exist)
    real dice_weight = 1.0;
    int metrics_every = 25;
};

struct UnetTrainResult {
    std::vector<real> loss_curve;
    real best_val_dice = -1.0; // -1 when no validation pairs were given
};

// Cross-entropy + soft-Dice on random crops; keeps the best-validation
// parameters when validation pairs are provided.
UnetTrainResult unet_train(Unet& model, const UnetTrainConfig& cfg,
                           const std::vector<Volume>& images,
                           const std::vector<SegmentationMap>& labels,
                           const std::vector<Volume>& val_images = {},
                           const std::vector<SegmentationMap>& val_labels = {});

void save_unet(const std::string& path, const Unet& model, bool trained,
               const nlohmann::json& extra = {});
Unet load_unet(const std::string& path, bool require_finished = true);

// ---- evaluation ---------------------------------------------------------------

struct DiceReport {
    std::vector<std::string> class_names;       // size C
    std::vector<real> per_class_mean;           // size C (mean across volumes)
    std::vector<real> per_volume_mean;          // size n_volumes (foreground mean)
    real mean = 0.0;                            // mean over per_volume_mean
    real stddev = 0.0;                          // std across volumes
};

// Per-structure Dice (mean across volumes), volume-wise mean and std.
DiceReport report_from_predictions(const std::vector<SegmentationMap>& predictions,
                                   const std::vector<SegmentationMap>& ground_truth,
                                   const std::vector<std::string>& class_names = {});
DiceReport evaluate(const Unet& model, const std::vector<Volume>& images,
                    const std::vector<SegmentationMap>& ground_truth,
                    const std::vector<std::string>& class_names = {});

// CSV rows "structure_name,dice" plus a trailing summary row "mean,XX.X±Y.Y"
// (percentages, one decimal).
void write_dice_csv(const std::string& path, const DiceReport& report);
std::string format_dice_table(const DiceReport& report);

} // namespace segnet
} // namespace atlasgen

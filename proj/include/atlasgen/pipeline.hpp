#pragma once

#include "atlasgen/config.hpp"
#include "atlasgen/dataio.hpp"
#include "atlasgen/segnet.hpp"
#include "atlasgen/synth.hpp"
#include "atlasgen/trainer.hpp"

namespace atlasgen {
namespace pipeline {

using voxelcore::SegmentationMap;
using voxelcore::Volume;

// Cohort loaded from disk with its deterministic split and atlas selection.
struct LoadedCohort {
    dataio::Cohort cohort;
    dataio::CohortSplit split;
    std::vector<Volume> train_vols, val_vols, test_vols;
    std::vector<SegmentationMap> test_segs;
    std::vector<int> train_families, test_families;
    int atlas_in_train = 0; // index into train_vols
    trainer::TrainData train_data;
};

LoadedCohort prepare_cohort(const std::string& cohort_dir, uint64_t split_seed,
                            const voxelcore::SsimOptions& atlas_ssim = {});

// t_seg = F(A(b, E(t)), t) (.) b_seg — the full registration pathway with
// style translation of the atlas toward each target.
SegmentationMap styled_register_transfer(const trainer::JointModels& models, const Volume& atlas,
                                         const SegmentationMap& atlas_seg, const Volume& target);

// Mean Dice of the registration pathway over a target set.
real styled_registration_dice(const trainer::JointModels& models, const Volume& atlas,
                              const SegmentationMap& atlas_seg,
                              const std::vector<Volume>& targets,
                              const std::vector<SegmentationMap>& gts);

// Fraction of k nearest neighbours (cosine similarity) sharing the query's
// family label, averaged over all codes.
real knn_family_purity(const std::vector<Tensor>& codes, const std::vector<int>& families, int k);

// Encoded style codes of a volume list (eval mode, raw codes).
std::vector<Tensor> encode_all(const style::StyleEncoder& enc, const std::vector<Volume>& vols);

// Standard run-directory layout.
struct RunPaths {
    std::string run_dir;
    std::string config_echo() const { return run_dir + "/config.ini"; }
    std::string metrics() const { return run_dir + "/metrics.csv"; }
    std::string checkpoints() const { return run_dir + "/checkpoints"; }
    std::string t_ckpt() const { return checkpoints() + "/t_model.ckpt"; }
    std::string style_ckpt() const { return checkpoints() + "/style.ckpt"; }
    std::string joint_ckpt() const { return checkpoints() + "/joint.ckpt"; }
    std::string aae_ckpt() const { return checkpoints() + "/aae.ckpt"; }
    std::string unet_ckpt() const { return checkpoints() + "/unet.ckpt"; }
};

} // namespace pipeline
} // namespace atlasgen

#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "atlasgen/nifti.hpp"
#include "atlasgen/rng.hpp"
#include "atlasgen/voxelcore.hpp"

namespace atlasgen {
namespace dataio {

using voxelcore::FlowField;
using voxelcore::SegmentationMap;
using voxelcore::Volume;

// ---- volume I/O -------------------------------------------------------------

// Intensities min-max normalized to [0,1] per volume (constant volumes map to
// all zeros); orientation metadata preserved.
Volume load_volume(const std::string& path, bool normalize = true);
SegmentationMap load_labels(const std::string& path, int num_classes = 0); // 0 = infer
FlowField load_flow(const std::string& path);

void save_volume(const std::string& path, const Volume& v);
void save_labels(const std::string& path, const SegmentationMap& seg);
void save_flow(const std::string& path, const FlowField& flow);

// ---- preprocessing ------------------------------------------------------------

// Pads with zeros first when the input is smaller than the target; crop margins
// split evenly with the extra voxel dropped from (padded onto) the high side.
Volume center_crop(const Volume& v, std::array<int, 3> shape = {128, 160, 160});
SegmentationMap center_crop(const SegmentationMap& seg, std::array<int, 3> shape = {128, 160, 160});

// ---- cohort handling ----------------------------------------------------------

struct CohortSplit {
    std::vector<int> train, val, test;
};

// 20% of volumes to test, remaining 90/10 train/val, patient-disjoint,
// deterministic under the seed. Fewer than 5 patients is rejected.
CohortSplit split_cohort(const std::vector<std::string>& patient_of_volume, uint64_t seed);

// Index of the volume most similar (ssim_l1) to the voxelwise mean; ties break
// to the lowest index.
int select_atlas(const std::vector<Volume>& train_volumes,
                 const voxelcore::SsimOptions& ssim = {});

// ---- procedural phantom cohort -------------------------------------------------

struct PhantomOptions {
    std::array<int, 3> shape = {32, 40, 40};
    int num_classes = 5;     // background + 4 nested structures
    real texture_amp = 0.08; // within-tissue intensity variation
    real voxel_noise = 0.01;
};

struct PhantomCohort {
    std::vector<Volume> volumes;
    std::vector<SegmentationMap> segs;
    std::vector<FlowField> gt_warps; // target(x) = canonical(x + warp(x))
    std::vector<int> families;
    std::vector<std::string> patient_ids;
    PhantomOptions opts;
    int n_families = 0;
    uint64_t seed = 0;
};

// Nested smooth ellipsoidal structures deformed by a random smooth warp and
// rendered under one of k parametric intensity transfer functions.
PhantomCohort make_phantom_cohort(int n_patients, int n_style_families, real geometry_spread,
                                  uint64_t seed, PhantomOptions opts = {});

// ---- cohort directories ---------------------------------------------------------

struct CohortItem {
    std::string id;
    std::string patient;
    int family = -1;
    std::string vol_path;
    std::string seg_path;
    std::string warp_path; // empty when absent
};

struct Cohort {
    std::vector<CohortItem> items;
    std::array<int, 3> shape{};
    int num_classes = 0;
    int n_families = 0;
    uint64_t seed = 0;
};

void write_cohort(const std::string& dir, const PhantomCohort& cohort);
Cohort read_cohort(const std::string& dir);

Volume load_cohort_volume(const std::string& dir, const CohortItem& item);
SegmentationMap load_cohort_labels(const std::string& dir, const CohortItem& item, int num_classes);

} // namespace dataio
} // namespace atlasgen

#include "atlasgen/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace atlasgen {
namespace pipeline {

LoadedCohort prepare_cohort(const std::string& cohort_dir, uint64_t split_seed,
                            const voxelcore::SsimOptions& atlas_ssim) {
    LoadedCohort lc;
    lc.cohort = dataio::read_cohort(cohort_dir);
    std::vector<std::string> patients;
    for (const auto& item : lc.cohort.items) patients.push_back(item.patient);
    lc.split = dataio::split_cohort(patients, split_seed);

    auto load_split = [&](const std::vector<int>& idx, std::vector<Volume>& vols) {
        for (int i : idx)
            vols.push_back(dataio::load_cohort_volume(cohort_dir, lc.cohort.items[static_cast<size_t>(i)]));
    };
    load_split(lc.split.train, lc.train_vols);
    load_split(lc.split.val, lc.val_vols);
    load_split(lc.split.test, lc.test_vols);
    for (int i : lc.split.test) {
        lc.test_segs.push_back(dataio::load_cohort_labels(
            cohort_dir, lc.cohort.items[static_cast<size_t>(i)], lc.cohort.num_classes));
        lc.test_families.push_back(lc.cohort.items[static_cast<size_t>(i)].family);
    }
    for (int i : lc.split.train) lc.train_families.push_back(lc.cohort.items[static_cast<size_t>(i)].family);

    lc.atlas_in_train = dataio::select_atlas(lc.train_vols, atlas_ssim);
    const int atlas_global = lc.split.train[static_cast<size_t>(lc.atlas_in_train)];

    lc.train_data.train = lc.train_vols;
    lc.train_data.val = lc.val_vols;
    lc.train_data.atlas = lc.train_vols[static_cast<size_t>(lc.atlas_in_train)];
    lc.train_data.atlas_seg = dataio::load_cohort_labels(
        cohort_dir, lc.cohort.items[static_cast<size_t>(atlas_global)], lc.cohort.num_classes);
    lc.train_data.atlas_train_index = lc.atlas_in_train;
    return lc;
}

SegmentationMap styled_register_transfer(const trainer::JointModels& models, const Volume& atlas,
                                         const SegmentationMap& atlas_seg, const Volume& target) {
    ad::NoGradGuard ng;
    ad::Var t = ad::constant(voxelcore::volume_batch(target));
    ad::Var code = models.query.forward(t);
    ad::Var s_tilde = models.appearance.forward(ad::constant(voxelcore::volume_batch(atlas)), code);
    Volume styled = voxelcore::volume_from_batch(s_tilde.value());
    return flow::register_and_transfer(models.flow_model, styled, atlas_seg, target);
}

real styled_registration_dice(const trainer::JointModels& models, const Volume& atlas,
                              const SegmentationMap& atlas_seg, const std::vector<Volume>& targets,
                              const std::vector<SegmentationMap>& gts) {
    check(!targets.empty() && targets.size() == gts.size(),
          "styled_registration_dice: target/label mismatch");
    real acc = 0.0;
    for (size_t i = 0; i < targets.size(); ++i) {
        SegmentationMap t_seg = styled_register_transfer(models, atlas, atlas_seg, targets[i]);
        acc += voxelcore::dice_score(t_seg, gts[i]);
    }
    return acc / static_cast<real>(targets.size());
}

real knn_family_purity(const std::vector<Tensor>& codes, const std::vector<int>& families, int k) {
    check(codes.size() == families.size() && codes.size() > 1, "knn_family_purity: bad inputs");
    const int n = static_cast<int>(codes.size());
    k = std::min(k, n - 1);
    auto cosine = [&](int a, int b) {
        real dot = 0, na = 0, nb = 0;
        for (int64_t i = 0; i < codes[static_cast<size_t>(a)].numel(); ++i) {
            const real x = codes[static_cast<size_t>(a)].data[static_cast<size_t>(i)];
            const real y = codes[static_cast<size_t>(b)].data[static_cast<size_t>(i)];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        return dot / (std::sqrt(na * nb) + 1e-12);
    };
    real purity = 0.0;
    for (int i = 0; i < n; ++i) {
        std::vector<std::pair<real, int>> sims;
        for (int j = 0; j < n; ++j)
            if (j != i) sims.emplace_back(cosine(i, j), j);
        std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        int same = 0;
        for (int j = 0; j < k; ++j)
            if (families[static_cast<size_t>(sims[static_cast<size_t>(j)].second)] ==
                families[static_cast<size_t>(i)])
                ++same;
        purity += static_cast<real>(same) / k;
    }
    return purity / n;
}

std::vector<Tensor> encode_all(const style::StyleEncoder& enc, const std::vector<Volume>& vols) {
    std::vector<Tensor> codes;
    ad::NoGradGuard ng;
    for (const auto& v : vols) {
        ad::Var c = enc.forward(ad::constant(voxelcore::volume_batch(v)));
        Tensor t({enc.config().style_dim});
        std::copy_n(c.value().ptr(), t.numel(), t.ptr());
        codes.push_back(std::move(t));
    }
    return codes;
}

} // namespace pipeline
} // namespace atlasgen

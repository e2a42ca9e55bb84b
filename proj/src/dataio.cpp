#include "atlasgen/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

namespace atlasgen {
namespace dataio {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------- I/O

Volume load_volume(const std::string& path, bool normalize) {
    NiftiVolume nv = read_nifti(path);
    if (nv.data.ndim() != 3)
        throw DataError("expected a scalar 3D volume in " + path + ", got " +
                        shape_str(nv.data.shape));
    if (!nv.data.all_finite()) throw DataError("non-finite intensities in " + path);
    Volume v(std::move(nv.data));
    v.meta = nv.meta;
    if (normalize) {
        const real lo = v.data.min();
        const real hi = v.data.max();
        if (hi > lo) {
            const real inv = 1.0 / (hi - lo);
            for (auto& x : v.data.data) x = (x - lo) * inv;
        } else {
            for (auto& x : v.data.data) x = 0.0; // degenerate constant volume
        }
    }
    return v;
}

SegmentationMap load_labels(const std::string& path, int num_classes) {
    NiftiVolume nv = read_nifti(path);
    if (nv.data.ndim() != 3)
        throw DataError("expected a 3D label map in " + path + ", got " + shape_str(nv.data.shape));
    int max_label = 0;
    for (real v : nv.data.data) {
        if (v != std::floor(v) || v < 0)
            throw DataError("non-integer or negative label in " + path);
        max_label = std::max(max_label, static_cast<int>(v));
    }
    if (num_classes == 0) num_classes = max_label + 1;
    return SegmentationMap(std::move(nv.data), num_classes);
}

FlowField load_flow(const std::string& path) {
    NiftiVolume nv = read_nifti(path);
    if (nv.data.ndim() != 4 || nv.data.dim(0) != 3)
        throw DataError("expected a 3-component flow field in " + path);
    return FlowField(std::move(nv.data));
}

void save_volume(const std::string& path, const Volume& v) {
    write_nifti(path, v.data, v.meta, NiftiDtype::F32);
}

void save_labels(const std::string& path, const SegmentationMap& seg) {
    check(seg.num_classes <= 256, "save_labels: more than 256 classes");
    write_nifti(path, seg.labels, {}, NiftiDtype::U8);
}

void save_flow(const std::string& path, const FlowField& flow) {
    write_nifti(path, flow.vectors, {}, NiftiDtype::F32);
}

// ------------------------------------------------------------------- cropping

namespace {

Tensor center_crop_tensor(const Tensor& in, std::array<int, 3> target) {
    Tensor src = in;
    std::array<int, 3> dims = {in.dim(0), in.dim(1), in.dim(2)};
    // zero-pad first if any axis is short; extra voxel goes to the high side
    if (dims[0] < target[0] || dims[1] < target[1] || dims[2] < target[2]) {
        std::array<int, 3> pdims = {std::max(dims[0], target[0]), std::max(dims[1], target[1]),
                                    std::max(dims[2], target[2])};
        Tensor padded({pdims[0], pdims[1], pdims[2]});
        std::array<int, 3> lo{};
        for (int a = 0; a < 3; ++a) lo[static_cast<size_t>(a)] = (pdims[static_cast<size_t>(a)] - dims[static_cast<size_t>(a)]) / 2;
        for (int z = 0; z < dims[0]; ++z)
            for (int y = 0; y < dims[1]; ++y)
                for (int x = 0; x < dims[2]; ++x)
                    padded.data[(static_cast<size_t>(z + lo[0]) * pdims[1] + (y + lo[1])) * pdims[2] +
                                (x + lo[2])] =
                        src.data[(static_cast<size_t>(z) * dims[1] + y) * dims[2] + x];
        src = std::move(padded);
        dims = pdims;
    }
    std::array<int, 3> start{};
    for (int a = 0; a < 3; ++a)
        start[static_cast<size_t>(a)] = (dims[static_cast<size_t>(a)] - target[static_cast<size_t>(a)]) / 2;
    Tensor out({target[0], target[1], target[2]});
    for (int z = 0; z < target[0]; ++z)
        for (int y = 0; y < target[1]; ++y)
            for (int x = 0; x < target[2]; ++x)
                out.data[(static_cast<size_t>(z) * target[1] + y) * target[2] + x] =
                    src.data[(static_cast<size_t>(z + start[0]) * dims[1] + (y + start[1])) * dims[2] +
                             (x + start[2])];
    return out;
}

} // namespace

Volume center_crop(const Volume& v, std::array<int, 3> shape) {
    Volume out(center_crop_tensor(v.data, shape));
    out.meta = v.meta;
    return out;
}

SegmentationMap center_crop(const SegmentationMap& seg, std::array<int, 3> shape) {
    return SegmentationMap(center_crop_tensor(seg.labels, shape), seg.num_classes);
}

// --------------------------------------------------------------------- splits

CohortSplit split_cohort(const std::vector<std::string>& patient_of_volume, uint64_t seed) {
    check(!patient_of_volume.empty(), "split_cohort: empty cohort");
    std::vector<std::string> patients;
    std::map<std::string, std::vector<int>> by_patient;
    for (size_t i = 0; i < patient_of_volume.size(); ++i) {
        auto& vols = by_patient[patient_of_volume[i]];
        if (vols.empty()) patients.push_back(patient_of_volume[i]);
        vols.push_back(static_cast<int>(i));
    }
    if (patients.size() < 5)
        throw DataError("split_cohort: need at least 5 patients, got " +
                        std::to_string(patients.size()));
    Rng rng = Rng::derive(seed, "cohort-split");
    rng.shuffle(patients);

    const int64_t total = static_cast<int64_t>(patient_of_volume.size());
    const int64_t test_target = std::llround(0.2 * static_cast<double>(total));
    CohortSplit split;
    size_t p = 0;
    int64_t test_count = 0;
    while (p < patients.size() && test_count < test_target) {
        for (int idx : by_patient[patients[p]]) split.test.push_back(idx);
        test_count += static_cast<int64_t>(by_patient[patients[p]].size());
        ++p;
    }
    const int64_t remaining = total - test_count;
    const int64_t val_target = std::llround(0.1 * static_cast<double>(remaining));
    int64_t val_count = 0;
    while (p < patients.size() && val_count < val_target) {
        for (int idx : by_patient[patients[p]]) split.val.push_back(idx);
        val_count += static_cast<int64_t>(by_patient[patients[p]].size());
        ++p;
    }
    for (; p < patients.size(); ++p)
        for (int idx : by_patient[patients[p]]) split.train.push_back(idx);
    check(!split.train.empty(), "split_cohort: no training volumes left");
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

int select_atlas(const std::vector<Volume>& train_volumes, const voxelcore::SsimOptions& ssim) {
    check(!train_volumes.empty(), "select_atlas: empty training set");
    const auto& shape = train_volumes[0].data.shape;
    Volume mean{Tensor(shape)};
    for (const auto& v : train_volumes) {
        check(v.data.shape == shape, "select_atlas: mixed volume shapes");
        for (int64_t i = 0; i < v.data.numel(); ++i)
            mean.data.data[static_cast<size_t>(i)] += v.data.data[static_cast<size_t>(i)];
    }
    for (auto& x : mean.data.data) x /= static_cast<real>(train_volumes.size());
    int best = 0;
    real best_loss = 0.0;
    for (size_t i = 0; i < train_volumes.size(); ++i) {
        const real l = voxelcore::ssim_l1_loss(train_volumes[i], mean, ssim);
        if (i == 0 || l < best_loss) {
            best = static_cast<int>(i);
            best_loss = l;
        }
    }
    return best;
}

// -------------------------------------------------------------------- phantom

namespace {

// Trilinear resize of a [C,d,h,w] grid to [C,D,H,W] (voxel-center mapping).
Tensor resize_trilinear(const Tensor& in, int D, int H, int W) {
    const int C = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    Tensor out({C, D, H, W});
    auto coeff = [](int dst, int n_dst, int n_src, int& i0, int& i1, real& f) {
        const real p = (dst + 0.5) * static_cast<real>(n_src) / n_dst - 0.5;
        real fl = std::floor(p);
        i0 = static_cast<int>(fl);
        f = p - fl;
        i1 = i0 + 1;
        if (i0 < 0) { i0 = i1 = 0; f = 0; }
        if (i1 > n_src - 1) { i1 = i0 = n_src - 1; f = 0; }
    };
    for (int c = 0; c < C; ++c) {
        const real* src = in.ptr() + static_cast<int64_t>(c) * d * h * w;
        real* dst = out.ptr() + static_cast<int64_t>(c) * D * H * W;
        for (int z = 0; z < D; ++z) {
            int z0, z1; real fz;
            coeff(z, D, d, z0, z1, fz);
            for (int y = 0; y < H; ++y) {
                int y0, y1; real fy;
                coeff(y, H, h, y0, y1, fy);
                for (int x = 0; x < W; ++x) {
                    int x0, x1; real fx;
                    coeff(x, W, w, x0, x1, fx);
                    auto at = [&](int zz, int yy, int xx) {
                        return src[(static_cast<int64_t>(zz) * h + yy) * w + xx];
                    };
                    dst[(static_cast<int64_t>(z) * H + y) * W + x] =
                        (1 - fz) * ((1 - fy) * ((1 - fx) * at(z0, y0, x0) + fx * at(z0, y0, x1)) +
                                    fy * ((1 - fx) * at(z0, y1, x0) + fx * at(z0, y1, x1))) +
                        fz * ((1 - fy) * ((1 - fx) * at(z1, y0, x0) + fx * at(z1, y0, x1)) +
                              fy * ((1 - fx) * at(z1, y1, x0) + fx * at(z1, y1, x1)));
                }
            }
        }
    }
    return out;
}

struct Blob {
    int label;
    real cz, cy, cx;
    real rz, ry, rx;
};

// Nested anatomy in normalized [-1,1] coordinates; later entries override.
const std::vector<Blob>& anatomy() {
    static const std::vector<Blob> blobs = {
        {1, 0.00, 0.00, 0.00, 0.82, 0.86, 0.86},  // outer tissue
        {2, 0.08, 0.00, 0.00, 0.52, 0.60, 0.58},  // inner tissue
        {3, 0.00, 0.08, -0.20, 0.26, 0.30, 0.13}, // ventricle, left lobe
        {3, 0.00, 0.08, 0.20, 0.26, 0.30, 0.13},  // ventricle, right lobe
        {4, 0.12, -0.30, -0.32, 0.17, 0.18, 0.15},// nucleus, left
        {4, 0.12, -0.30, 0.32, 0.17, 0.18, 0.15}, // nucleus, right
    };
    return blobs;
}

int label_at(real nz, real ny, real nx, int num_classes) {
    int label = 0;
    for (const auto& b : anatomy()) {
        if (b.label >= num_classes) continue;
        const real dz = (nz - b.cz) / b.rz;
        const real dy = (ny - b.cy) / b.ry;
        const real dx = (nx - b.cx) / b.rx;
        if (dz * dz + dy * dy + dx * dx <= 1.0) label = std::max(label, b.label);
    }
    return label;
}

real tissue_value(int label) {
    static const real base[5] = {0.03, 0.42, 0.72, 0.12, 0.92};
    return base[label];
}

// Family-specific monotone intensity transfer functions.
real family_transfer(int family, real v, real p1, real p2) {
    switch (family % 5) {
        case 0: return 0.12 + (0.78 + 0.05 * p1) * v;                       // linear bright
        case 1: return 0.90 - (0.78 + 0.05 * p1) * v;                       // inverted
        case 2: return 0.04 + 0.92 * std::pow(v, 2.4 + 0.2 * p1);           // dark gamma
        case 3: return 0.04 + 0.92 * std::pow(v, 0.45 + 0.05 * p1);         // bright gamma
        default: {
            const real k = 8.0 + 2.0 * p2;
            const real s = 1.0 / (1.0 + std::exp(-k * (v - 0.5)));
            return 0.05 + 0.90 * s;
        }
    }
}

} // namespace

PhantomCohort make_phantom_cohort(int n_patients, int n_style_families, real geometry_spread,
                                  uint64_t seed, PhantomOptions opts) {
    if (n_patients < 2) throw UsageError("make_phantom_cohort: need at least 2 patients");
    if (n_style_families < 2) throw UsageError("make_phantom_cohort: need at least 2 families");
    check(opts.num_classes >= 2 && opts.num_classes <= 5,
          "make_phantom_cohort: supported class counts are 2..5");
    const int D = opts.shape[0], H = opts.shape[1], W = opts.shape[2];
    check(D >= 8 && H >= 8 && W >= 8, "make_phantom_cohort: volume too small");

    PhantomCohort cohort;
    cohort.opts = opts;
    cohort.n_families = n_style_families;
    cohort.seed = seed;

    // Deterministic family assignment, balanced across patients.
    std::vector<int> family_of(static_cast<size_t>(n_patients));
    for (int i = 0; i < n_patients; ++i) family_of[static_cast<size_t>(i)] = i % n_style_families;
    Rng shuffle_rng = Rng::derive(seed, "family-shuffle");
    shuffle_rng.shuffle(family_of);

    const int64_t m = static_cast<int64_t>(D) * H * W;
    for (int i = 0; i < n_patients; ++i) {
        Rng rng = Rng::derive(seed, "phantom-" + std::to_string(i));
        const int family = family_of[static_cast<size_t>(i)];
        Rng frng = Rng::derive(seed, "family-" + std::to_string(family));
        const real fp1 = frng.normal(), fp2 = frng.normal();

        // smooth random deformation, in voxels
        Tensor coarse({3, 4, 5, 5});
        for (auto& v : coarse.data) v = rng.normal(0.0, geometry_spread);
        Tensor warp = resize_trilinear(coarse, D, H, W);

        // within-tissue texture: coarse plus mid-frequency correlated noise, so
        // every neighbourhood carries registration signal
        Tensor tex_coarse({1, 6, 8, 8});
        for (auto& v : tex_coarse.data) v = rng.normal(0.0, 1.0);
        Tensor tex_mid({1, 12, 16, 16});
        for (auto& v : tex_mid.data) v = rng.normal(0.0, 1.0);
        Tensor texture = resize_trilinear(tex_coarse, D, H, W);
        Tensor texture_mid = resize_trilinear(tex_mid, D, H, W);
        for (int64_t i = 0; i < texture.numel(); ++i)
            texture.data[static_cast<size_t>(i)] += 0.8 * texture_mid.data[static_cast<size_t>(i)];

        const real brightness = rng.uniform(-0.02, 0.02);
        const real contrast = rng.uniform(0.95, 1.05);

        // texture lives in canonical space and deforms with the anatomy
        auto texture_at = [&](real pz, real py, real px) {
            pz = std::clamp(pz, 0.0, static_cast<real>(D - 1));
            py = std::clamp(py, 0.0, static_cast<real>(H - 1));
            px = std::clamp(px, 0.0, static_cast<real>(W - 1));
            const int z0 = std::min(static_cast<int>(pz), D - 2 >= 0 ? D - 2 : 0);
            const int y0 = std::min(static_cast<int>(py), H - 2 >= 0 ? H - 2 : 0);
            const int x0 = std::min(static_cast<int>(px), W - 2 >= 0 ? W - 2 : 0);
            const real fz = pz - z0, fy = py - y0, fx = px - x0;
            auto at = [&](int zz, int yy, int xx) {
                return texture.data[(static_cast<size_t>(zz) * H + yy) * W + xx];
            };
            return (1 - fz) * ((1 - fy) * ((1 - fx) * at(z0, y0, x0) + fx * at(z0, y0, x0 + 1)) +
                               fy * ((1 - fx) * at(z0, y0 + 1, x0) + fx * at(z0, y0 + 1, x0 + 1))) +
                   fz * ((1 - fy) * ((1 - fx) * at(z0 + 1, y0, x0) + fx * at(z0 + 1, y0, x0 + 1)) +
                         fy * ((1 - fx) * at(z0 + 1, y0 + 1, x0) +
                               fx * at(z0 + 1, y0 + 1, x0 + 1)));
        };

        Tensor img({D, H, W});
        Tensor lab({D, H, W});
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int64_t idx = (static_cast<int64_t>(z) * H + y) * W + x;
                    const real qz = z + warp.data[static_cast<size_t>(idx)];
                    const real qy = y + warp.data[static_cast<size_t>(m + idx)];
                    const real qx = x + warp.data[static_cast<size_t>(2 * m + idx)];
                    const real nz = (qz - 0.5 * (D - 1)) / (0.5 * D);
                    const real ny = (qy - 0.5 * (H - 1)) / (0.5 * H);
                    const real nx = (qx - 0.5 * (W - 1)) / (0.5 * W);
                    const int label = label_at(nz, ny, nx, opts.num_classes);
                    lab.data[static_cast<size_t>(idx)] = static_cast<real>(label);
                    real v = tissue_value(label);
                    if (label > 0) v += opts.texture_amp * texture_at(qz, qy, qx);
                    v = std::clamp(v, 0.0, 1.0);
                    real intensity = family_transfer(family, v, fp1, fp2);
                    intensity = 0.5 + (intensity + brightness - 0.5) * contrast;
                    intensity += rng.normal(0.0, opts.voxel_noise);
                    img.data[static_cast<size_t>(idx)] = std::clamp(intensity, 0.0, 1.0);
                }

        cohort.volumes.push_back(Volume(std::move(img)));
        cohort.segs.emplace_back(std::move(lab), opts.num_classes);
        cohort.gt_warps.push_back(FlowField(std::move(warp)));
        cohort.families.push_back(family);
        char pid[16];
        std::snprintf(pid, sizeof(pid), "p%03d", i);
        cohort.patient_ids.emplace_back(pid);
    }
    return cohort;
}

// ----------------------------------------------------------- cohort directory

void write_cohort(const std::string& dir, const PhantomCohort& cohort) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["shape"] = cohort.opts.shape;
    manifest["num_classes"] = cohort.opts.num_classes;
    manifest["n_families"] = cohort.n_families;
    manifest["seed"] = cohort.seed;
    nlohmann::json items = nlohmann::json::array();
    for (size_t i = 0; i < cohort.volumes.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%03zu", i);
        const std::string id(buf);
        const std::string vol = "vol_" + id + ".nii.gz";
        const std::string seg = "seg_" + id + ".nii.gz";
        const std::string warp = "warp_" + id + ".nii.gz";
        save_volume(dir + "/" + vol, cohort.volumes[i]);
        save_labels(dir + "/" + seg, cohort.segs[i]);
        save_flow(dir + "/" + warp, cohort.gt_warps[i]);
        items.push_back({{"id", id},
                         {"patient", cohort.patient_ids[i]},
                         {"family", cohort.families[i]},
                         {"vol", vol},
                         {"seg", seg},
                         {"warp", warp}});
    }
    manifest["volumes"] = items;
    std::ofstream os(dir + "/manifest.json", std::ios::trunc);
    if (!os) throw DataError("cannot write cohort manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

Cohort read_cohort(const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw DataError("no cohort manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(is, nullptr, false);
    if (manifest.is_discarded()) throw DataError("corrupt cohort manifest in " + dir);
    Cohort c;
    auto shape = manifest.at("shape").get<std::vector<int>>();
    check(shape.size() == 3, "cohort manifest: bad shape");
    c.shape = {shape[0], shape[1], shape[2]};
    c.num_classes = manifest.at("num_classes").get<int>();
    c.n_families = manifest.value("n_families", 0);
    c.seed = manifest.value("seed", 0ull);
    for (const auto& item : manifest.at("volumes")) {
        CohortItem ci;
        ci.id = item.at("id").get<std::string>();
        ci.patient = item.at("patient").get<std::string>();
        ci.family = item.value("family", -1);
        ci.vol_path = item.at("vol").get<std::string>();
        ci.seg_path = item.value("seg", "");
        ci.warp_path = item.value("warp", "");
        c.items.push_back(std::move(ci));
    }
    check(!c.items.empty(), "cohort manifest lists no volumes");
    return c;
}

Volume load_cohort_volume(const std::string& dir, const CohortItem& item) {
    return load_volume(dir + "/" + item.vol_path);
}

SegmentationMap load_cohort_labels(const std::string& dir, const CohortItem& item,
                                   int num_classes) {
    check(!item.seg_path.empty(), "cohort item " + item.id + " has no labels");
    return load_labels(dir + "/" + item.seg_path, num_classes);
}

} // namespace dataio
} // namespace atlasgen

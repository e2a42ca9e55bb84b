#include "atlasgen/synth.hpp"

#include <filesystem>
#include <fstream>

#include "atlasgen/dataio.hpp"

namespace atlasgen {
namespace synth {

namespace fs = std::filesystem;

namespace {

Tensor sample_code(Rng& rng, int dim, real truncation) {
    Tensor t({dim});
    for (auto& v : t.data) {
        real x = rng.normal();
        if (truncation > 0)
            while (std::fabs(x) > truncation) x = rng.normal();
        v = x;
    }
    return t;
}

std::string code_hash(const Tensor& t) {
    const uint64_t h = fnv1a64(t.data.data(), t.data.size() * sizeof(real));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace

GeneratedPair sample_pair(const Volume& base, const SegmentationMap& base_seg,
                          const appearance::AppearanceModel& appearance_model,
                          const flowaae::FlowAae& aae, Rng& rng, const SampleOptions& opts) {
    require_same_shape(base.data, base_seg.labels, "sample_pair");
    ad::NoGradGuard ng;
    GeneratedPair out;
    out.style_code = sample_code(rng, appearance_model.config().style_dim, opts.style_truncation);
    out.flow_code = sample_code(rng, aae.config().latent_dim, /*truncation=*/0.0);

    flowaae::FlowCode fc;
    fc.vector = out.flow_code;
    voxelcore::FlowField flow = flowaae::decode_flow(aae, fc);

    style::StyleCode sc;
    sc.vector = out.style_code;
    Volume styled = appearance::apply_style(appearance_model, base, sc);

    out.image = voxelcore::warp_volume(styled, flow);
    out.labels = voxelcore::warp_labels(base_seg, flow);
    return out;
}

std::string generate_dataset(const GenerateConfig& cfg, const std::string& out_dir,
                             const Volume& base, const SegmentationMap& base_seg,
                             const appearance::AppearanceModel& appearance_model,
                             const flowaae::FlowAae& aae,
                             const std::string& appearance_ckpt_hash,
                             const std::string& aae_ckpt_hash) {
    if (cfg.count < 1) throw UsageError("generate_dataset: need count >= 1");
    fs::create_directories(out_dir);
    std::vector<std::string> written;
    nlohmann::json rows = nlohmann::json::array();
    try {
        for (int i = 0; i < cfg.count; ++i) {
            Rng rng = Rng::derive(cfg.seed, "pair-" + std::to_string(i));
            GeneratedPair pair = sample_pair(base, base_seg, appearance_model, aae, rng, cfg.sample);
            char id[16];
            std::snprintf(id, sizeof(id), "%05d", i);
            const std::string vol = std::string("gen_") + id + "_vol.nii.gz";
            const std::string seg = std::string("gen_") + id + "_seg.nii.gz";
            dataio::save_volume(out_dir + "/" + vol, pair.image);
            written.push_back(out_dir + "/" + vol);
            dataio::save_labels(out_dir + "/" + seg, pair.labels);
            written.push_back(out_dir + "/" + seg);
            rows.push_back({{"id", std::string(id)},
                            {"seed", cfg.seed},
                            {"index", i},
                            {"style_hash", code_hash(pair.style_code)},
                            {"flow_hash", code_hash(pair.flow_code)},
                            {"vol", vol},
                            {"seg", seg}});
        }
    } catch (...) {
        for (const auto& f : written) {
            std::error_code ec;
            fs::remove(f, ec);
        }
        throw;
    }
    const std::string manifest_path = out_dir + "/manifest.jsonl";
    std::ofstream os(manifest_path, std::ios::trunc);
    if (!os) throw DataError("cannot write manifest: " + manifest_path);
    nlohmann::json header = {{"type", "header"},
                             {"count", cfg.count},
                             {"seed", cfg.seed},
                             {"num_classes", base_seg.num_classes},
                             {"style_truncation", cfg.sample.style_truncation},
                             {"appearance_ckpt_hash", appearance_ckpt_hash},
                             {"aae_ckpt_hash", aae_ckpt_hash}};
    os << header.dump() << "\n";
    for (const auto& row : rows) os << row.dump() << "\n";
    return manifest_path;
}

GeneratedDataset load_generated(const std::string& dir, int limit, int num_classes) {
    std::ifstream is(dir + "/manifest.jsonl");
    if (!is) throw DataError("no generated-dataset manifest in " + dir);
    GeneratedDataset out;
    std::string line;
    int header_classes = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json row = nlohmann::json::parse(line, nullptr, false);
        if (row.is_discarded()) throw DataError("corrupt manifest line in " + dir);
        if (row.value("type", "") == "header") {
            header_classes = row.value("num_classes", 0);
            continue;
        }
        if (limit > 0 && static_cast<int>(out.images.size()) >= limit) break;
        out.images.push_back(dataio::load_volume(dir + "/" + row.at("vol").get<std::string>()));
        out.labels.push_back(dataio::load_labels(dir + "/" + row.at("seg").get<std::string>(),
                                                 num_classes ? num_classes : header_classes));
    }
    check(!out.images.empty(), "generated dataset in " + dir + " is empty");
    return out;
}

} // namespace synth
} // namespace atlasgen

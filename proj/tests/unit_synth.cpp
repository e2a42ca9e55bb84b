#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "atlasgen/checkpoint.hpp"
#include "atlasgen/dataio.hpp"
#include "atlasgen/synth.hpp"

using namespace atlasgen;
using namespace atlasgen::synth;
using voxelcore::SegmentationMap;
using voxelcore::Volume;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("agsynth_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string str() const { return path.string(); }
};

struct Fixture {
    Volume base;
    SegmentationMap base_seg;
    appearance::AppearanceModel app;
    flowaae::FlowAae aae;

    Fixture() {
        dataio::PhantomOptions opts;
        opts.shape = {16, 16, 16};
        auto cohort = dataio::make_phantom_cohort(2, 2, 1.2, 99, opts);
        base = cohort.volumes[0];
        base_seg = cohort.segs[0];
        Rng rng(901);
        appearance::AppearanceConfig ac;
        ac.enc_channels = {3, 4};
        ac.style_dim = 6;
        app = appearance::AppearanceModel(ac, rng);
        flowaae::FlowAaeConfig fc;
        fc.enc_channels = {4, 8};
        fc.latent_dim = 5;
        fc.disc_hidden = {8};
        fc.spatial_shape = {16, 16, 16};
        aae = flowaae::FlowAae(fc, rng);
    }

    void zero_decoder() {
        ad::ParamMap pm;
        aae.collect_autoencoder(pm, "aae");
        for (auto& [name, v] : pm.items)
            if (name.find("head") != std::string::npos)
                for (auto& x : v.node()->value.data) x = 0.0;
    }
};

} // namespace

TEST_CASE("sample_pair: zero-flow decoder keeps the base labels exactly") {
    Fixture fx;
    fx.zero_decoder();
    Rng rng(11);
    GeneratedPair pair = sample_pair(fx.base, fx.base_seg, fx.app, fx.aae, rng);
    CHECK(pair.labels.labels.data == fx.base_seg.labels.data);
    CHECK(pair.image.data.shape == fx.base.data.shape);
}

TEST_CASE("sample_pair is deterministic under a fixed rng") {
    Fixture fx;
    Rng a(21), b(21);
    GeneratedPair pa = sample_pair(fx.base, fx.base_seg, fx.app, fx.aae, a);
    GeneratedPair pb = sample_pair(fx.base, fx.base_seg, fx.app, fx.aae, b);
    CHECK(pa.image.data.data == pb.image.data.data);
    CHECK(pa.labels.labels.data == pb.labels.labels.data);
    Rng c(22);
    GeneratedPair pc = sample_pair(fx.base, fx.base_seg, fx.app, fx.aae, c);
    CHECK(pa.image.data.data != pc.image.data.data);
}

TEST_CASE("generated labels stay within the base label set; shapes match") {
    Fixture fx;
    std::set<int> base_labels;
    for (int64_t i = 0; i < fx.base_seg.labels.numel(); ++i)
        base_labels.insert(fx.base_seg.label_at(i));
    Rng rng(31);
    for (int rep = 0; rep < 5; ++rep) {
        GeneratedPair pair = sample_pair(fx.base, fx.base_seg, fx.app, fx.aae, rng);
        CHECK(pair.image.data.shape == pair.labels.labels.shape);
        for (int64_t i = 0; i < pair.labels.labels.numel(); ++i)
            CHECK(base_labels.count(pair.labels.label_at(i)) == 1);
    }
}

TEST_CASE("style truncation bounds the sampled style codes") {
    Fixture fx;
    Rng rng(41);
    SampleOptions opts;
    opts.style_truncation = 1.0;
    for (int rep = 0; rep < 10; ++rep) {
        GeneratedPair pair = sample_pair(fx.base, fx.base_seg, fx.app, fx.aae, rng, opts);
        for (real v : pair.style_code.data) CHECK(std::fabs(v) <= 1.0);
    }
}

TEST_CASE("generate_dataset writes n pairs plus a manifest, deterministically") {
    Fixture fx;
    TempDir dir_a, dir_b;
    GenerateConfig cfg;
    cfg.count = 3;
    cfg.seed = 7;
    const std::string ma =
        generate_dataset(cfg, dir_a.str(), fx.base, fx.base_seg, fx.app, fx.aae, "aph", "fph");
    CHECK(std::filesystem::exists(ma));
    int vols = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir_a.str()))
        if (e.path().string().find("_vol.nii.gz") != std::string::npos) ++vols;
    CHECK(vols == 3);

    generate_dataset(cfg, dir_b.str(), fx.base, fx.base_seg, fx.app, fx.aae, "aph", "fph");
    for (const auto& e : std::filesystem::directory_iterator(dir_a.str())) {
        const std::string name = e.path().filename().string();
        CHECK(file_hash_hex(dir_a.str() + "/" + name) == file_hash_hex(dir_b.str() + "/" + name));
    }

    GeneratedDataset ds = load_generated(dir_a.str());
    CHECK(ds.images.size() == 3);
    CHECK(ds.labels.size() == 3);
    CHECK(ds.labels[0].num_classes == fx.base_seg.num_classes);
    GeneratedDataset limited = load_generated(dir_a.str(), 2);
    CHECK(limited.images.size() == 2);

    CHECK_THROWS_AS(generate_dataset({0, 1, {}}, dir_a.str(), fx.base, fx.base_seg, fx.app,
                                     fx.aae, "a", "f"),
                    UsageError);
}

TEST_CASE("manifest rows carry seeds and code hashes") {
    Fixture fx;
    TempDir dir;
    GenerateConfig cfg;
    cfg.count = 2;
    cfg.seed = 123;
    generate_dataset(cfg, dir.str(), fx.base, fx.base_seg, fx.app, fx.aae, "apphash", "aaehash");
    std::ifstream is(dir.str() + "/manifest.jsonl");
    std::string line;
    REQUIRE(std::getline(is, line));
    auto header = nlohmann::json::parse(line);
    CHECK(header.at("type") == "header");
    CHECK(header.at("appearance_ckpt_hash") == "apphash");
    CHECK(header.at("seed") == 123);
    int rows = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto row = nlohmann::json::parse(line);
        CHECK(row.at("style_hash").get<std::string>().size() == 16);
        CHECK(row.at("vol").get<std::string>().find("_vol.nii.gz") != std::string::npos);
        ++rows;
    }
    CHECK(rows == 2);
}

#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>

#include "atlasgen/checkpoint.hpp"
#include "atlasgen/dataio.hpp"
#include "atlasgen/flowaae.hpp"
#include "atlasgen/trainer.hpp"

using namespace atlasgen;
namespace fs = std::filesystem;

namespace {

std::string bin() {
    const char* b = std::getenv("ATLASGEN_BIN");
    REQUIRE(b != nullptr);
    return b;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("agcli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string str() const { return path.string(); }
};

int run_cmd(const std::string& args, const std::string& log) {
    const std::string cmd = bin() + " " + args + " >" + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// micro budgets + tiny nets on 16^3 phantoms
std::string micro_overrides() {
    return " --set phantom.shape=16,16,16"
           " --set train.steps_pretrain_t=2 --set train.steps_pretrain_style=2"
           " --set train.steps_joint=2 --set train.steps_aae=2"
           " --set train.batch_pretrain=2 --set train.batch_joint=1"
           " --set train.queue_capacity=6 --set train.metrics_every=1"
           " --set style_encoder.channels=4,8 --set style_encoder.style_dim=6"
           " --set style_disc.hidden=8 --set appearance.enc_channels=3,4"
           " --set appearance.style_dim=6"
           " --set t_model.enc_channels=4,8 --set t_model.dec_channels=8,4"
           " --set t_model.half_res_flow=false"
           " --set flow_model.enc_channels=4,8 --set flow_model.dec_channels=8,4"
           " --set flow_model.half_res_flow=false"
           " --set aae.enc_channels=4,8 --set aae.latent_dim=5 --set aae.disc_hidden=8"
           " --set unet.levels=2 --set unet.base_channels=4 --set unet.stem_stride=1"
           " --set unet_train.steps=3 --set unet_train.patch=16,16,16"
           " --set generate.count=2";
}

struct PipelineFixture {
    TempDir root;
    std::string cohort, run, log;
    PipelineFixture() {
        cohort = root.str() + "/cohort";
        run = root.str() + "/run";
        log = root.str() + "/log.txt";
        REQUIRE(run_cmd("phantom --n 6 --families 2 --seed 7 --out " + cohort + micro_overrides(),
                        log) == 0);
    }
    int phase(const std::string& name, const std::string& extra = "") {
        return run_cmd(name + " --data " + cohort + " --out " + run + micro_overrides() + extra,
                       log);
    }
};

} // namespace

TEST_CASE("cli: phantom writes a cohort, deterministically; bad counts exit 2") {
    TempDir dir;
    const std::string log = dir.str() + "/log.txt";
    REQUIRE(run_cmd("phantom --n 10 --families 3 --seed 7 --out " + dir.str() + "/a" +
                        micro_overrides(),
                    log) == 0);
    auto cohort = dataio::read_cohort(dir.str() + "/a");
    CHECK(cohort.items.size() == 10);
    CHECK(fs::exists(dir.str() + "/a/manifest.json"));

    REQUIRE(run_cmd("phantom --n 10 --families 3 --seed 7 --out " + dir.str() + "/b" +
                        micro_overrides(),
                    log) == 0);
    for (const auto& e : fs::directory_iterator(dir.str() + "/a")) {
        const std::string name = e.path().filename().string();
        CHECK(file_hash_hex(dir.str() + "/a/" + name) == file_hash_hex(dir.str() + "/b/" + name));
    }

    CHECK(run_cmd("phantom --n 0 --families 3 --seed 7 --out " + dir.str() + "/c", log) == 2);
    CHECK(run_cmd("phantom --bogus-flag", log) == 2);
}

TEST_CASE("cli: full micro pipeline with ordering, generation and evaluation") {
    PipelineFixture fx;

    // out-of-order runs name the missing checkpoint and exit 3
    CHECK(fx.phase("pretrain-style") == 3);
    CHECK(read_file(fx.log).find("t_model.ckpt") != std::string::npos);

    REQUIRE(fx.phase("pretrain-t") == 0);
    CHECK(fx.phase("train-joint") == 3); // style pre-training still missing
    CHECK(read_file(fx.log).find("style.ckpt") != std::string::npos);
    REQUIRE(fx.phase("pretrain-style") == 0);
    REQUIRE(fx.phase("train-joint") == 0);
    REQUIRE(fx.phase("train-aae") == 0);

    // config echo reflects overrides plus defaults
    const std::string echo = read_file(fx.run + "/config.ini");
    CHECK(echo.find("steps_joint = 2") != std::string::npos);
    CHECK(echo.find("lambda1 = 5") != std::string::npos);

    // generate twice with the same seed: byte-identical outputs
    const std::string atlas = fx.cohort + "/vol_000.nii.gz";
    const std::string atlas_seg = fx.cohort + "/seg_000.nii.gz";
    const std::string gen_a = fx.root.str() + "/gen_a";
    const std::string gen_b = fx.root.str() + "/gen_b";
    const std::string gen_flags = " --models " + fx.run + " --atlas " + atlas + " --atlas-seg " +
                                  atlas_seg + " --seed 5 --n 2" + micro_overrides();
    REQUIRE(run_cmd("generate --out " + gen_a + gen_flags, fx.log) == 0);
    REQUIRE(run_cmd("generate --out " + gen_b + gen_flags, fx.log) == 0);
    for (const auto& e : fs::directory_iterator(gen_a)) {
        const std::string name = e.path().filename().string();
        CHECK(file_hash_hex(gen_a + "/" + name) == file_hash_hex(gen_b + "/" + name));
    }

    // cross-site appearance swap records the override checkpoint hash
    const std::string gen_c = fx.root.str() + "/gen_c";
    REQUIRE(run_cmd("generate --out " + gen_c + gen_flags + " --site-appearance " + fx.run +
                        "/checkpoints/joint.ckpt",
                    fx.log) == 0);
    {
        std::ifstream is(gen_c + "/manifest.jsonl");
        std::string header_line;
        REQUIRE(std::getline(is, header_line));
        auto header = nlohmann::json::parse(header_line);
        CHECK(header.at("appearance_ckpt_hash") ==
              file_hash_hex(fx.run + "/checkpoints/joint.ckpt"));
    }

    // U-Net on generated pairs, then evaluation on the cohort test split
    const std::string unet_run = fx.root.str() + "/unet";
    REQUIRE(run_cmd("train-unet --data " + gen_a + " --out " + unet_run + micro_overrides(),
                    fx.log) == 0);
    REQUIRE(run_cmd("evaluate --model " + unet_run + " --data " + fx.cohort + " --out " +
                        fx.root.str() + "/dice.csv" + micro_overrides(),
                    fx.log) == 0);
    const std::string csv = read_file(fx.root.str() + "/dice.csv");
    CHECK(csv.find("structure_name,dice") != std::string::npos);
    CHECK(csv.find("mean,") != std::string::npos);

    // embeddings: one row per cohort volume
    const std::string emb = fx.root.str() + "/emb.csv";
    REQUIRE(run_cmd("export-embeddings --models " + fx.run + " --data " + fx.cohort + " --out " +
                        emb + micro_overrides(),
                    fx.log) == 0);
    int lines = 0;
    {
        std::ifstream is(emb);
        std::string l;
        while (std::getline(is, l)) ++lines;
    }
    CHECK(lines == 7); // header + 6 volumes

    // interpolate-flow endpoints decode the two seeded codes exactly
    const std::string strip = fx.root.str() + "/strip";
    REQUIRE(run_cmd("interpolate-flow --models " + fx.run + " --atlas " + atlas + " --atlas-seg " +
                        atlas_seg + " --steps 3 --seed 9 --out " + strip + micro_overrides(),
                    fx.log) == 0);
    CHECK(fs::exists(strip + "/interp_00_vol.nii.gz"));
    CHECK(fs::exists(strip + "/interp_02_seg.nii.gz"));
    {
        flowaae::FlowAae aae = trainer::load_aae(fx.run + "/checkpoints/aae.ckpt");
        trainer::JointSnapshot joint = trainer::load_joint(fx.run + "/checkpoints/joint.ckpt");
        Rng rng = Rng::derive(9, "interpolate");
        flowaae::FlowCode a, b;
        a.vector = Tensor({aae.config().latent_dim});
        b.vector = Tensor({aae.config().latent_dim});
        for (auto& v : a.vector.data) v = rng.normal();
        for (auto& v : b.vector.data) v = rng.normal();
        Tensor style_t({joint.models.appearance.config().style_dim});
        for (auto& v : style_t.data) v = rng.normal();
        style::StyleCode sc;
        sc.vector = style_t;
        voxelcore::Volume styled =
            appearance::apply_style(joint.models.appearance,
                                    dataio::load_volume(atlas), sc);
        voxelcore::Volume want_first =
            voxelcore::warp_volume(styled, flowaae::decode_flow(aae, a));
        voxelcore::Volume got_first = dataio::load_volume(strip + "/interp_00_vol.nii.gz",
                                                          /*normalize=*/false);
        real max_diff = 0.0;
        for (int64_t i = 0; i < want_first.data.numel(); ++i)
            max_diff = std::max(max_diff, std::fabs(want_first.data.data[static_cast<size_t>(i)] -
                                                    got_first.data.data[static_cast<size_t>(i)]));
        CHECK(max_diff < 1e-6); // float32 storage precision
    }

    // sweep: one-point grid emits one row
    const std::string sweep_csv = fx.run + "/sweep.csv";
    REQUIRE(run_cmd("sweep --data " + fx.cohort + " --out " + fx.run + " --point 5.0,1.0,0.1" +
                        micro_overrides(),
                    fx.log) == 0);
    const std::string sw = read_file(sweep_csv);
    CHECK(sw.find("lambda1,lambda2,lambda3") != std::string::npos);
    CHECK(sw.find("ok") != std::string::npos);
}

TEST_CASE("cli: resume continues the loss curve seamlessly") {
    PipelineFixture fx;
    REQUIRE(fx.phase("pretrain-t") == 0);
    // straight 4-step style run in a sibling run dir
    const std::string run_b = fx.root.str() + "/run_b";
    REQUIRE(run_cmd("pretrain-t --data " + fx.cohort + " --out " + run_b + micro_overrides(),
                    fx.log) == 0);
    REQUIRE(run_cmd("pretrain-style --data " + fx.cohort + " --out " + run_b + micro_overrides() +
                        " --set train.steps_pretrain_style=4",
                    fx.log) == 0);
    // 2 steps, then resume to 4
    REQUIRE(fx.phase("pretrain-style") == 0);
    REQUIRE(fx.phase("pretrain-style", " --resume --set train.steps_pretrain_style=4") == 0);

    auto style_rows = [&](const std::string& metrics) {
        std::vector<std::string> rows;
        std::ifstream is(metrics);
        std::string line;
        while (std::getline(is, line))
            if (line.rfind("pretrain_style,", 0) == 0) rows.push_back(line);
        return rows;
    };
    auto a = style_rows(run_b + "/metrics.csv");
    auto b = style_rows(fx.run + "/metrics.csv");
    REQUIRE(a.size() == b.size());
    CHECK(a == b);
}

TEST_CASE("cli: data errors exit 3") {
    TempDir dir;
    const std::string log = dir.str() + "/log.txt";
    CHECK(run_cmd("pretrain-t --data " + dir.str() + "/nope --out " + dir.str() + "/run", log) == 3);
}

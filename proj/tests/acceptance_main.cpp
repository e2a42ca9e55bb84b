// Acceptance suite: runs every criterion at its stated tolerance and prints
// one PASS/FAIL line per criterion. Exit code = number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sys/wait.h>
#include <unistd.h>

#include "atlasgen/checkpoint.hpp"
#include "atlasgen/config.hpp"
#include "atlasgen/dataio.hpp"
#include "atlasgen/pipeline.hpp"
#include "atlasgen/segnet.hpp"
#include "atlasgen/synth.hpp"
#include "atlasgen/trainer.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace atlasgen;
using atlasgen::voxelcore::SegmentationMap;
using atlasgen::voxelcore::Volume;
namespace fs = std::filesystem;
namespace oracle = agtest::oracle;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

std::vector<Criterion> g_results;

void run_criterion(const std::string& name, const std::function<std::string()>& body) {
    Criterion c;
    c.name = name;
    const auto t0 = Clock::now();
    try {
        c.detail = body();
        c.pass = true;
    } catch (const std::exception& e) {
        c.pass = false;
        c.detail = e.what();
    }
    c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("[%s] %s (%.1fs)%s%s\n", c.pass ? "PASS" : "FAIL", c.name.c_str(), c.seconds,
                c.detail.empty() ? "" : " — ", c.detail.c_str());
    std::fflush(stdout);
    g_results.push_back(std::move(c));
}

void expect(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

Volume random_volume(Rng& rng, int d, int h, int w) {
    Tensor t({d, h, w});
    for (auto& v : t.data) v = rng.uniform();
    return Volume(std::move(t));
}

std::string fmt(double v, int prec = 3) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

// ---------------------------------------------------------------- pipeline

// Desk-scale acceptance configuration (calibrated budgets).
config::PipelineConfig acceptance_config() {
    auto cfg = config::PipelineConfig::desk_defaults();
    cfg.train.seed = 42;
    cfg.train.lr = 1e-3;
    cfg.train.batch_pretrain = 4;
    cfg.train.steps_pretrain_t = 600;
    cfg.train.steps_pretrain_style = 500;
    cfg.train.steps_joint = 1000;
    cfg.train.steps_aae = 600;
    cfg.train.init_flow_from_t = true;
    cfg.train.checkpoint_every = 0;
    cfg.train.metrics_every = 25;
    cfg.appearance.enc_channels = {4, 8};
    cfg.appearance.style_dim = 16;
    cfg.flow_model.enc_channels = {6, 12, 12};
    cfg.flow_model.dec_channels = {12, 12, 6};
    cfg.flow_model.half_res_flow = true;
    cfg.t_model = cfg.flow_model;
    cfg.unet_train.steps = 400;
    cfg.unet_train.lr = 1e-3;
    return cfg;
}

struct PipelineArtifacts {
    std::string work;
    config::PipelineConfig cfg;
    pipeline::LoadedCohort lc;
    real baseline_dice = 0.0; // identity transfer, test split
    real reg_dice_with = 0.0;
    real reg_dice_without = 0.0;
    real purity = 0.0;
    real sup_full = 0.0, sup_half = 0.0, sup_tenth = 0.0;
    real sup_atlas_only = 0.0;
    real sup_without = 0.0;
    real sup_full_median = 0.0, sup_half_median = 0.0, sup_tenth_median = 0.0;
    real aae_mean = 0.0, aae_var = 0.0, aae_l1_step0 = 0.0, aae_l1_final = 0.0;
    double pipeline_seconds = 0.0;
    bool ran = false;
    std::string error;
};

real median_of(std::vector<real> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

real unet_arm(const PipelineArtifacts& art, const std::vector<Volume>& images,
              const std::vector<SegmentationMap>& labels, uint64_t seed, real* median_out) {
    segnet::UnetConfig ucfg = art.cfg.unet;
    ucfg.num_classes = art.lc.cohort.num_classes;
    Rng rng = Rng::derive(seed, "acceptance-unet");
    segnet::Unet model(ucfg, rng);
    segnet::UnetTrainConfig utc = art.cfg.unet_train;
    utc.seed = seed;
    segnet::unet_train(model, utc, images, labels);
    segnet::DiceReport rep = segnet::evaluate(model, art.lc.test_vols, art.lc.test_segs);
    if (median_out) *median_out = median_of(rep.per_volume_mean);
    return rep.mean;
}

PipelineArtifacts run_pipeline() {
    PipelineArtifacts art;
    const auto t0 = Clock::now();
    art.cfg = acceptance_config();
    art.work = (fs::temp_directory_path() / "atlasgen_acceptance").string();
    fs::remove_all(art.work);
    fs::create_directories(art.work);
    try {
        // 20-patient cohort, 32x40x40, 3 style families, 5 classes
        auto cohort = dataio::make_phantom_cohort(20, 3, 2.5, 42, art.cfg.phantom);
        dataio::write_cohort(art.work + "/cohort", cohort);
        art.lc = pipeline::prepare_cohort(art.work + "/cohort", 42, art.cfg.ssim);
        for (size_t i = 0; i < art.lc.test_vols.size(); ++i)
            art.baseline_dice += voxelcore::dice_score(art.lc.train_data.atlas_seg, art.lc.test_segs[i]);
        art.baseline_dice /= static_cast<real>(art.lc.test_vols.size());

        const std::string t_ckpt = art.work + "/t.ckpt";
        const std::string style_ckpt = art.work + "/style.ckpt";
        trainer::run_pretrain_t(art.cfg.train, art.cfg.t_model, art.lc.train_data, t_ckpt, nullptr,
                                false);
        trainer::run_pretrain_style(art.cfg.train, art.cfg.style_enc, art.cfg.style_disc,
                                    art.lc.train_data, t_ckpt, style_ckpt, nullptr, false);

        // style clustering purity over the whole cohort (criterion 6)
        {
            Checkpoint ck = read_checkpoint(style_ckpt);
            Rng dummy(0);
            style::StyleEncoder enc(
                style::StyleEncoderConfig::from_json(ck.meta.at("encoder_config")), dummy);
            ad::ParamMap pm;
            enc.collect(pm, "query");
            load_params(pm, ck);
            std::vector<Volume> all;
            std::vector<int> fams;
            for (const auto& item : art.lc.cohort.items) {
                all.push_back(dataio::load_cohort_volume(art.work + "/cohort", item));
                fams.push_back(item.family);
            }
            art.purity = pipeline::knn_family_purity(pipeline::encode_all(enc, all), fams, 5);
        }

        trainer::JointPhaseArgs args;
        args.appearance_cfg = art.cfg.appearance;
        args.flow_cfg = art.cfg.flow_model;
        args.ssim = art.cfg.ssim;
        args.t_ckpt = t_ckpt;
        args.style_ckpt = style_ckpt;

        // w/ L_app arm
        const std::string joint_with = art.work + "/joint_with.ckpt";
        trainer::run_joint(art.cfg.train, args, art.lc.train_data, joint_with, nullptr, false);
        trainer::JointSnapshot with = trainer::load_joint(joint_with);
        art.reg_dice_with =
            pipeline::styled_registration_dice(with.models, art.lc.train_data.atlas,
                                               art.lc.train_data.atlas_seg, art.lc.test_vols,
                                               art.lc.test_segs);

        // w/o L_app ablation arm (lambda1 = 0)
        trainer::TrainConfig ablated = art.cfg.train;
        ablated.lambda1 = 0.0;
        const std::string joint_wo = art.work + "/joint_without.ckpt";
        trainer::run_joint(ablated, args, art.lc.train_data, joint_wo, nullptr, false);
        trainer::JointSnapshot without = trainer::load_joint(joint_wo);
        art.reg_dice_without =
            pipeline::styled_registration_dice(without.models, art.lc.train_data.atlas,
                                               art.lc.train_data.atlas_seg, art.lc.test_vols,
                                               art.lc.test_segs);

        // flow AAE on the w/ arm (criterion 7 statistics land in the meta)
        const std::string aae_with = art.work + "/aae_with.ckpt";
        trainer::run_train_aae(art.cfg.train, art.cfg.aae, art.lc.train_data, joint_with, aae_with,
                               nullptr, false);
        {
            Checkpoint ck = read_checkpoint(aae_with);
            art.aae_mean = ck.meta.at("code_mean").get<real>();
            art.aae_var = ck.meta.at("code_var_mean").get<real>();
            art.aae_l1_step0 = ck.meta.at("recon_l1_step0").get<real>();
            art.aae_l1_final = ck.meta.at("recon_l1_final").get<real>();
        }
        const std::string aae_wo = art.work + "/aae_without.ckpt";
        trainer::run_train_aae(art.cfg.train, art.cfg.aae, art.lc.train_data, joint_wo, aae_wo,
                               nullptr, false);

        // generate 200 pairs per arm
        flowaae::FlowAae aae_w = trainer::load_aae(aae_with);
        synth::GenerateConfig gen = art.cfg.generate;
        gen.count = 200;
        gen.seed = 77;
        synth::generate_dataset(gen, art.work + "/gen_with", art.lc.train_data.atlas,
                                art.lc.train_data.atlas_seg, with.models.appearance, aae_w, "w",
                                "w");
        flowaae::FlowAae aae_o = trainer::load_aae(aae_wo);
        synth::generate_dataset(gen, art.work + "/gen_without", art.lc.train_data.atlas,
                                art.lc.train_data.atlas_seg, without.models.appearance, aae_o,
                                "wo", "wo");

        // U-Net arms
        synth::GeneratedDataset full = synth::load_generated(art.work + "/gen_with");
        art.sup_full = unet_arm(art, full.images, full.labels, 101, &art.sup_full_median);
        {
            synth::GeneratedDataset half = synth::load_generated(art.work + "/gen_with", 100);
            art.sup_half = unet_arm(art, half.images, half.labels, 102, &art.sup_half_median);
            synth::GeneratedDataset tenth = synth::load_generated(art.work + "/gen_with", 20);
            art.sup_tenth = unet_arm(art, tenth.images, tenth.labels, 103, &art.sup_tenth_median);
        }
        art.sup_atlas_only = unet_arm(art, {art.lc.train_data.atlas}, {art.lc.train_data.atlas_seg},
                                      104, nullptr);
        {
            synth::GeneratedDataset wo = synth::load_generated(art.work + "/gen_without");
            art.sup_without = unet_arm(art, wo.images, wo.labels, 105, nullptr);
        }
        art.ran = true;
    } catch (const std::exception& e) {
        art.error = e.what();
    }
    art.pipeline_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return art;
}

// ------------------------------------------------------------- determinism

std::string bin_path() {
    const char* b = std::getenv("ATLASGEN_BIN");
    expect(b != nullptr, "ATLASGEN_BIN not set");
    return b;
}

int run_cli(const std::string& args, const std::string& log) {
    const std::string cmd = bin_path() + " " + args + " >" + log + " 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
}

// Recursive file-hash comparison of two directories (no timestamped files are
// produced by the CLI).
void expect_dirs_equal(const std::string& a, const std::string& b, const std::string& what) {
    std::vector<std::string> rel;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a).string());
    std::sort(rel.begin(), rel.end());
    expect(!rel.empty(), what + ": no files produced");
    for (const auto& r : rel) {
        expect(fs::exists(b + "/" + r), what + ": " + r + " missing from second run");
        expect(file_hash_hex(a + "/" + r) == file_hash_hex(b + "/" + r),
               what + ": " + r + " differs between reruns");
    }
}

std::string micro_flags() {
    return " --set phantom.shape=16,16,16"
           " --set train.steps_pretrain_t=3 --set train.steps_pretrain_style=3"
           " --set train.steps_joint=3 --set train.steps_aae=3"
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

void determinism_pass(const std::string& root, int run_idx) {
    const std::string r = root + "/r" + std::to_string(run_idx);
    fs::create_directories(r);
    const std::string log = root + "/log.txt";
    auto cli = [&](const std::string& args) {
        const int rc = run_cli(args + micro_flags(), log);
        if (rc != 0) {
            std::ifstream is(log);
            std::stringstream ss;
            ss << is.rdbuf();
            throw std::runtime_error("cli failed (" + std::to_string(rc) + "): " + args + " :: " +
                                     ss.str());
        }
    };
    cli("phantom --n 6 --families 2 --seed 7 --out " + r + "/cohort");
    cli("pretrain-t --data " + r + "/cohort --out " + r + "/run");
    cli("pretrain-style --data " + r + "/cohort --out " + r + "/run");
    cli("train-joint --data " + r + "/cohort --out " + r + "/run");
    cli("train-aae --data " + r + "/cohort --out " + r + "/run");
    cli("generate --models " + r + "/run --atlas " + r + "/cohort/vol_000.nii.gz --atlas-seg " +
        r + "/cohort/seg_000.nii.gz --seed 5 --n 2 --out " + r + "/gen");
    cli("train-unet --data " + r + "/gen --out " + r + "/unet");
    cli("evaluate --model " + r + "/unet --data " + r + "/cohort --out " + r + "/dice.csv");
    cli("export-embeddings --models " + r + "/run --data " + r + "/cohort --out " + r + "/emb.csv");
    cli("interpolate-flow --models " + r + "/run --atlas " + r + "/cohort/vol_000.nii.gz"
        " --atlas-seg " + r + "/cohort/seg_000.nii.gz --steps 3 --seed 9 --out " + r + "/strip");
    cli("sweep --data " + r + "/cohort --out " + r + "/run --point 5.0,1.0,0.1");
    fs::remove(log); // the only non-deterministic artifact (stdout capture)
}

} // namespace

int main() {
    std::printf("atlasgen acceptance suite\n");

    // 1 — analytic loss suite
    run_criterion("1 analytic losses", [] {
        Rng rng(11);
        Volume u = random_volume(rng, 16, 16, 16);
        expect(std::fabs(voxelcore::ssim_l1_loss(u, u)) <= 1e-6, "ssim_l1(u,u) exceeded 1e-6");

        const int K = 256;
        style::KeyQueue q(K, 4);
        Tensor e({1, 4});
        e.data[0] = 1.0;
        for (int i = 0; i < K; ++i) style::enqueue_keys(q, e);
        const real cl = style::contrastive_loss(ad::constant(e), ad::constant(e), q, 0.7).item();
        expect(std::fabs(cl - std::log(static_cast<real>(K + 1))) <= 1e-6,
               "uniform contrastive != log(K+1)");

        expect(voxelcore::lsgan_losses({1, 1}, {0, 0}, voxelcore::GanSide::Discriminator) == 0.0,
               "lsgan d(1,0) != 0");
        expect(voxelcore::lsgan_losses({0}, {1}, voxelcore::GanSide::Discriminator) == 2.0,
               "lsgan d(0,1) != 2");
        expect(voxelcore::lsgan_losses({}, {1, 1}, voxelcore::GanSide::Generator) == 0.0,
               "lsgan g(1) != 0");

        Tensor a({2, 2, 2});
        Tensor b({2, 2, 2});
        for (int i = 0; i < 4; ++i) a.data[static_cast<size_t>(i)] = b.data[static_cast<size_t>(i)] = 1.0;
        SegmentationMap pa(a, 2), pb(b, 2);
        expect(voxelcore::dice_per_class(pa, pb)[1] == 1.0, "dice identical != 1");
        Tensor c({2, 2, 2});
        for (int i = 4; i < 8; ++i) c.data[static_cast<size_t>(i)] = 1.0;
        expect(voxelcore::dice_per_class(pa, SegmentationMap(c, 2))[1] == 0.0, "dice disjoint != 0");
        Tensor h({2, 2, 2});
        h.data[2] = h.data[3] = h.data[4] = h.data[5] = 1.0;
        expect(voxelcore::dice_per_class(pa, SegmentationMap(h, 2))[1] == 0.5, "dice half != 0.5");

        Tensor cf({3, 4, 4, 4}, 1.7);
        expect(voxelcore::flow_gradient_l1(voxelcore::FlowField(cf)) == 0.0,
               "flow_gradient_l1(constant) != 0");
        return std::string();
    });

    // 2 — oracle equivalence
    run_criterion("2 oracle equivalence", [] {
        Rng rng(22);
        real max_warp = 0.0;
        for (int rep = 0; rep < 20; ++rep) {
            Volume u = random_volume(rng, 8, 8, 8);
            Tensor f({3, 8, 8, 8});
            for (auto& v : f.data) v = rng.uniform(-3.0, 3.0);
            voxelcore::FlowField flow(f);
            Volume got = voxelcore::warp_volume(u, flow);
            Tensor want = oracle::warp_reference(u.data, flow.vectors);
            for (int64_t i = 0; i < want.numel(); ++i)
                max_warp = std::max(max_warp,
                                    std::fabs(got.data.data[static_cast<size_t>(i)] - want.data[static_cast<size_t>(i)]));
        }
        expect(max_warp <= 1e-6, "warp vs oracle: " + fmt(max_warp, 9));

        Volume nu = random_volume(rng, 10, 10, 10);
        Volume nv = random_volume(rng, 10, 10, 10);
        const real ncc_diff =
            std::fabs(voxelcore::ncc_loss(nu, nv, 5) - oracle::ncc_reference(nu.data, nv.data, 5));
        expect(ncc_diff <= 1e-5, "ncc vs oracle: " + fmt(ncc_diff, 9));

        Volume su = random_volume(rng, 16, 16, 16);
        Volume sv = random_volume(rng, 16, 16, 16);
        const real ssim_diff = std::fabs(voxelcore::ssim_l1_loss(su, sv) -
                                         oracle::ssim_l1_reference(su.data, sv.data, 11, 1.5, 3));
        expect(ssim_diff <= 1e-5, "ms-ssim vs oracle: " + fmt(ssim_diff, 9));
        Volume mu = random_volume(rng, 24, 24, 24);
        Volume mv = random_volume(rng, 24, 24, 24);
        const real ms_diff = std::fabs(voxelcore::ssim_l1_loss(mu, mv) -
                                       oracle::ssim_l1_reference(mu.data, mv.data, 11, 1.5, 3));
        expect(ms_diff <= 1e-5, "2-scale ms-ssim vs oracle: " + fmt(ms_diff, 9));

        Tensor ft({3, 6, 5, 7});
        for (auto& v : ft.data) v = rng.normal();
        const real fg_diff = std::fabs(voxelcore::flow_gradient_l1(voxelcore::FlowField(ft)) -
                                       oracle::flow_grad_reference(ft));
        expect(fg_diff <= 1e-6, "flow grad vs oracle: " + fmt(fg_diff, 9));
        return std::string("max warp diff " + fmt(max_warp, 9));
    });

    // 3 — gradient checks
    run_criterion("3 gradient checks", [] {
        Rng rng(33);
        real worst = 0.0;
        {
            ad::Var img = ad::parameter(agtest::random_tensor(rng, {1, 1, 8, 8, 8}));
            Tensor ft({1, 3, 8, 8, 8});
            for (auto& v : ft.data) v = rng.uniform(0.15, 0.8);
            ad::Var flow = ad::parameter(ft);
            auto f = [&] { return ad::mean(ad::square(ad::warp3d(img, flow, ad::WarpMode::Trilinear))); };
            worst = std::max(worst, agtest::gradcheck(f, {img, flow}).max_rel_err);
        }
        voxelcore::SsimOptions o;
        o.window = 5;
        {
            ad::Var u = ad::parameter(agtest::random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
            ad::Var v = ad::parameter(agtest::random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
            auto f = [&] { return voxelcore::ssim_l1_loss(u, v, o); };
            worst = std::max(worst, agtest::gradcheck(f, {u, v}).max_rel_err);
        }
        {
            ad::Var u = ad::parameter(agtest::random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
            ad::Var v = ad::parameter(agtest::random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
            auto f = [&] { return voxelcore::ncc_loss(u, v, 5); };
            worst = std::max(worst, agtest::gradcheck(f, {u, v}).max_rel_err);
        }
        {
            ad::Var flow = ad::parameter(agtest::random_tensor(rng, {1, 3, 8, 8, 8}, -1.0, 1.0));
            auto f = [&] { return ad::flow_grad_l1(flow); };
            worst = std::max(worst, agtest::gradcheck(f, {flow}).max_rel_err);
        }
        {
            // composed L_app on a tiny appearance + style encoder
            appearance::AppearanceConfig ac;
            ac.enc_channels = {2, 3};
            ac.style_dim = 3;
            appearance::AppearanceModel model(ac, rng);
            style::StyleEncoderConfig sc;
            sc.channels = {2, 3};
            sc.style_dim = 3;
            style::StyleEncoder enc(sc, rng);
            ad::Var s = ad::constant(agtest::random_tensor(rng, {1, 1, 8, 8, 8}, 0.05, 0.95));
            ad::Var t = ad::constant(agtest::random_tensor(rng, {1, 1, 8, 8, 8}, 0.05, 0.95));
            voxelcore::SsimOptions so;
            so.window = 5;
            so.max_scales = 1;
            auto f = [&] {
                ad::Var code_t = enc.forward(t);
                ad::Var code_s = enc.forward(s);
                ad::Var s_tilde = model.forward(s, code_t);
                return ad::add(appearance::style_cycle_loss(s, s_tilde, model, code_s, so),
                               appearance::style_identity_loss(s, model, code_s, so));
            };
            ad::ParamMap pm;
            model.collect(pm);
            enc.collect(pm);
            std::vector<ad::Var> leaves;
            for (auto& [n, v] : pm.items) leaves.push_back(v);
            worst = std::max(worst, agtest::gradcheck(f, leaves).max_rel_err);
        }
        expect(worst <= 1e-3, "max relative error " + fmt(worst, 6));
        return "max relative error " + fmt(worst, 6);
    });

    // 4 — MoCo mechanics
    run_criterion("4 MoCo mechanics", [] {
        Rng rng(44);
        style::StyleEncoderConfig sc;
        sc.channels = {4, 8};
        sc.style_dim = 6;
        style::StyleEncoder query(sc, rng);
        style::StyleEncoder key(sc, rng);
        ad::ParamMap kp0;
        key.collect(kp0);
        std::vector<std::vector<real>> before;
        for (auto& [n, v] : kp0.items) before.push_back(v.value().data);
        style::momentum_update(query, key, 1.0);
        ad::ParamMap kp1;
        key.collect(kp1);
        for (size_t i = 0; i < kp1.items.size(); ++i)
            expect(kp1.items[i].second.value().data == before[i], "m=1 changed key params");
        style::momentum_update(query, key, 0.0);
        ad::ParamMap qp, kp2;
        query.collect(qp);
        key.collect(kp2);
        for (size_t i = 0; i < kp2.items.size(); ++i)
            expect(kp2.items[i].second.value().data == qp.items[i].second.value().data,
                   "m=0 did not copy query params");

        // queue FIFO against a reference deque over 1000 random sequences
        for (int rep = 0; rep < 1000; ++rep) {
            const int K = 1 + static_cast<int>(rng.uniform_int(6));
            style::KeyQueue q(K, 2);
            std::deque<std::pair<real, real>> ref;
            const int ops = 1 + static_cast<int>(rng.uniform_int(8));
            for (int o = 0; o < ops; ++o) {
                const int n = 1 + static_cast<int>(rng.uniform_int(4));
                Tensor batch({n, 2});
                for (int i = 0; i < n; ++i) {
                    batch.data[static_cast<size_t>(2 * i)] = rng.normal();
                    batch.data[static_cast<size_t>(2 * i + 1)] = rng.normal();
                    ref.emplace_back(batch.data[static_cast<size_t>(2 * i)], batch.data[static_cast<size_t>(2 * i + 1)]);
                    while (static_cast<int>(ref.size()) > K) ref.pop_front();
                }
                style::enqueue_keys(q, batch);
                expect(q.size() == static_cast<int>(ref.size()), "queue size mismatch");
                Tensor m = q.as_matrix();
                for (size_t i = 0; i < ref.size(); ++i) {
                    expect(m.data[2 * i] == ref[i].first && m.data[2 * i + 1] == ref[i].second,
                           "queue content mismatch");
                }
            }
        }

        // permutation invariance over negatives
        std::vector<Tensor> negs;
        for (int i = 0; i < 6; ++i) {
            Tensor t({1, 6});
            real ss = 0;
            for (auto& v : t.data) {
                v = rng.normal();
                ss += v * v;
            }
            for (auto& v : t.data) v /= std::sqrt(ss);
            negs.push_back(t);
        }
        Tensor qt({1, 6});
        real ss = 0;
        for (auto& v : qt.data) {
            v = rng.normal();
            ss += v * v;
        }
        for (auto& v : qt.data) v /= std::sqrt(ss);
        std::vector<int> order = {0, 1, 2, 3, 4, 5};
        real first = 0.0;
        for (int rep = 0; rep < 20; ++rep) {
            rng.shuffle(order);
            style::KeyQueue q(6, 6);
            for (int i : order) style::enqueue_keys(q, negs[static_cast<size_t>(i)]);
            const real l =
                style::contrastive_loss(ad::constant(qt), ad::constant(qt), q, 0.7).item();
            if (rep == 0)
                first = l;
            else
                expect(std::fabs(l - first) <= 1e-6, "permutation changed the loss");
        }
        return std::string();
    });

    // 5/6/7/9 — end-to-end phantom pipeline
    PipelineArtifacts art = run_pipeline();
    run_criterion("5 end-to-end phantom pipeline", [&] {
        expect(art.ran, "pipeline failed: " + art.error);
        expect(art.pipeline_seconds <= 1800.0,
               "pipeline exceeded 30 minutes: " + fmt(art.pipeline_seconds / 60.0, 1) + " min");
        const real gap_a = art.reg_dice_with - art.baseline_dice;
        expect(gap_a >= 0.10, "(a) registration gap " + fmt(100 * gap_a, 1) + " pts < 10 (reg " +
                                  fmt(art.reg_dice_with) + " vs baseline " +
                                  fmt(art.baseline_dice) + ")");
        const real gap_b = art.sup_full - art.sup_atlas_only;
        expect(gap_b >= 0.10, "(b) generated-vs-atlas U-Net gap " + fmt(100 * gap_b, 1) +
                                  " pts < 10 (gen " + fmt(art.sup_full) + " vs atlas-only " +
                                  fmt(art.sup_atlas_only) + ")");
        expect(art.reg_dice_with > art.reg_dice_without,
               "(c) registration direction: with " + fmt(art.reg_dice_with) + " !> without " +
                   fmt(art.reg_dice_without));
        expect(art.sup_full > art.sup_without,
               "(c) supervised direction: with " + fmt(art.sup_full) + " !> without " +
                   fmt(art.sup_without));
        return "reg " + fmt(art.reg_dice_with) + " vs base " + fmt(art.baseline_dice) + "; sup " +
               fmt(art.sup_full) + " vs atlas-only " + fmt(art.sup_atlas_only) + "; w/o app reg " +
               fmt(art.reg_dice_without) + " sup " + fmt(art.sup_without) + "; " +
               fmt(art.pipeline_seconds / 60.0, 1) + " min";
    });

    run_criterion("6 style clustering purity", [&] {
        expect(art.ran, "pipeline failed: " + art.error);
        expect(art.purity >= 0.8, "5-NN purity " + fmt(art.purity) + " < 0.8");
        return "5-NN purity " + fmt(art.purity);
    });

    run_criterion("7 AAE prior matching", [&] {
        expect(art.ran, "pipeline failed: " + art.error);
        expect(std::fabs(art.aae_mean) <= 0.5, "code mean " + fmt(art.aae_mean) + " outside ±0.5");
        expect(art.aae_var >= 0.5 && art.aae_var <= 2.0,
               "code variance " + fmt(art.aae_var) + " outside [0.5, 2.0]");
        expect(art.aae_l1_final <= 0.5 * art.aae_l1_step0,
               "round-trip L1 " + fmt(art.aae_l1_final, 4) + " not below half of step-0 " +
                   fmt(art.aae_l1_step0, 4));
        return "mean " + fmt(art.aae_mean) + ", var " + fmt(art.aae_var) + ", L1 " +
               fmt(art.aae_l1_step0, 4) + " -> " + fmt(art.aae_l1_final, 4);
    });

    run_criterion("8 subcommand determinism", [] {
        const std::string root = (fs::temp_directory_path() / "atlasgen_determinism").string();
        fs::remove_all(root);
        fs::create_directories(root);
        determinism_pass(root, 1);
        determinism_pass(root, 2);
        expect_dirs_equal(root + "/r1", root + "/r2", "determinism");
        fs::remove_all(root);
        return std::string("all subcommands byte-identical across reruns");
    });

    run_criterion("9 dataset-size monotonicity", [&] {
        expect(art.ran, "pipeline failed: " + art.error);
        expect(art.sup_tenth_median <= art.sup_half_median + 1e-12 &&
                   art.sup_half_median <= art.sup_full_median + 1e-12,
               "medians not non-decreasing: " + fmt(art.sup_tenth_median) + ", " +
                   fmt(art.sup_half_median) + ", " + fmt(art.sup_full_median));
        return "median Dice 10%/50%/100% = " + fmt(art.sup_tenth_median) + " / " +
               fmt(art.sup_half_median) + " / " + fmt(art.sup_full_median);
    });

    int fails = 0;
    for (const auto& c : g_results) fails += c.pass ? 0 : 1;
    std::printf("%d/%zu criteria passed\n", static_cast<int>(g_results.size()) - fails,
                g_results.size());
    return fails;
}

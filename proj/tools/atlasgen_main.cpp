// atlasgen — one-shot atlas-based synthesis of labeled 3D volumes.
//
// Subcommands wire the library into the full workflow: phantom data, the
// four training phases, dataset generation, downstream segmentation training
// and evaluation, plus the latent-space inspection utilities.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "atlasgen/checkpoint.hpp"
#include "atlasgen/config.hpp"
#include "atlasgen/dataio.hpp"
#include "atlasgen/pipeline.hpp"
#include "atlasgen/segnet.hpp"
#include "atlasgen/synth.hpp"
#include "atlasgen/trainer.hpp"

using namespace atlasgen;
using atlasgen::voxelcore::Volume;
namespace fs = std::filesystem;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string preset = "desk";
    std::vector<std::string> overrides;
};

config::PipelineConfig effective_config(const GlobalArgs& g) {
    config::PipelineConfig base = g.preset == "full" ? config::PipelineConfig::full_defaults()
                                                     : config::PipelineConfig::desk_defaults();
    config::PipelineConfig cfg =
        g.config_path.empty() ? base : config::load_config(g.config_path, base);
    for (const auto& o : g.overrides) config::apply_override(cfg, o);
    return cfg;
}

pipeline::RunPaths make_run_dir(const std::string& out, const config::PipelineConfig& cfg) {
    pipeline::RunPaths paths{out};
    fs::create_directories(paths.checkpoints());
    config::write_config(paths.config_echo(), cfg);
    return paths;
}

uint64_t split_seed_of(const config::PipelineConfig& cfg) {
    return cfg.split_seed ? cfg.split_seed : cfg.train.seed;
}

pipeline::LoadedCohort load_cohort_for(const config::PipelineConfig& cfg,
                                       const std::string& data_dir) {
    return pipeline::prepare_cohort(data_dir, split_seed_of(cfg), cfg.ssim);
}

void require_checkpoint(const std::string& path, const std::string& producer) {
    if (!fs::exists(path))
        throw DataError("missing prerequisite checkpoint " + path + "; run `atlasgen " + producer +
                        "` first (or pass --force where supported)");
}

int resolved_classes(const config::PipelineConfig& cfg, int cohort_classes) {
    return cfg.unet.num_classes > 0 ? cfg.unet.num_classes : cohort_classes;
}

std::string fmt_pct(real v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * v);
    return buf;
}

// ------------------------------------------------------------- subcommands

int cmd_phantom(const config::PipelineConfig& cfg, int n, int families, real spread,
                uint64_t seed, const std::string& out) {
    dataio::PhantomCohort cohort =
        dataio::make_phantom_cohort(n, families, spread, seed, cfg.phantom);
    dataio::write_cohort(out, cohort);
    std::cout << "wrote " << cohort.volumes.size() << " phantom volumes to " << out << "\n";
    return 0;
}

int cmd_pretrain_t(const config::PipelineConfig& cfg, const std::string& data,
                   const std::string& out, bool resume) {
    auto paths = make_run_dir(out, cfg);
    auto lc = load_cohort_for(cfg, data);
    trainer::MetricsWriter mw(paths.metrics(), /*append=*/true);
    auto outcome =
        trainer::run_pretrain_t(cfg.train, cfg.t_model, lc.train_data, paths.t_ckpt(), &mw, resume);
    std::cout << "pretrain-t finished at step " << outcome.steps << ", loss "
              << outcome.final_metrics["loss"] << "\n";
    return 0;
}

int cmd_pretrain_style(const config::PipelineConfig& cfg, const std::string& data,
                       const std::string& out, bool resume) {
    auto paths = make_run_dir(out, cfg);
    require_checkpoint(paths.t_ckpt(), "pretrain-t");
    auto lc = load_cohort_for(cfg, data);
    trainer::MetricsWriter mw(paths.metrics(), true);
    auto outcome = trainer::run_pretrain_style(cfg.train, cfg.style_enc, cfg.style_disc,
                                               lc.train_data, paths.t_ckpt(), paths.style_ckpt(),
                                               &mw, resume);
    std::cout << "pretrain-style finished at step " << outcome.steps << ", vol_cl "
              << outcome.final_metrics["vol_cl"] << "\n";
    return 0;
}

int cmd_train_joint(const config::PipelineConfig& cfg, const std::string& data,
                    const std::string& out, bool resume, bool force) {
    auto paths = make_run_dir(out, cfg);
    require_checkpoint(paths.t_ckpt(), "pretrain-t");
    trainer::JointPhaseArgs args;
    args.appearance_cfg = cfg.appearance;
    args.flow_cfg = cfg.flow_model;
    args.ssim = cfg.ssim;
    args.t_ckpt = paths.t_ckpt();
    args.style_ckpt = paths.style_ckpt();
    if (!fs::exists(paths.style_ckpt())) {
        if (!force)
            throw DataError("missing prerequisite checkpoint " + paths.style_ckpt() +
                            "; run `atlasgen pretrain-style` first or pass --force to train the "
                            "style encoder from scratch");
        args.skip_style_pretrain = true;
    }
    auto lc = load_cohort_for(cfg, data);
    trainer::MetricsWriter mw(paths.metrics(), true);
    auto outcome = trainer::run_joint(cfg.train, args, lc.train_data, paths.joint_ckpt(), &mw, resume);
    std::cout << "train-joint finished at step " << outcome.steps << ", total "
              << outcome.final_metrics["total"] << "\n";
    return 0;
}

int cmd_train_aae(const config::PipelineConfig& cfg, const std::string& data,
                  const std::string& out, bool resume) {
    auto paths = make_run_dir(out, cfg);
    require_checkpoint(paths.joint_ckpt(), "train-joint");
    auto lc = load_cohort_for(cfg, data);
    trainer::MetricsWriter mw(paths.metrics(), true);
    auto outcome = trainer::run_train_aae(cfg.train, cfg.aae, lc.train_data, paths.joint_ckpt(),
                                          paths.aae_ckpt(), &mw, resume);
    std::cout << "train-aae finished at step " << outcome.steps << ", recon_l1 "
              << outcome.final_metrics["recon_l1"] << "\n";
    return 0;
}

int cmd_generate(const config::PipelineConfig& cfg, const std::string& models_dir, int n,
                 uint64_t seed, const std::string& atlas_path, const std::string& atlas_seg_path,
                 const std::string& site_appearance, const std::string& out) {
    pipeline::RunPaths paths{models_dir};
    require_checkpoint(paths.joint_ckpt(), "train-joint");
    require_checkpoint(paths.aae_ckpt(), "train-aae");
    trainer::JointSnapshot joint = trainer::load_joint(paths.joint_ckpt());
    flowaae::FlowAae aae = trainer::load_aae(paths.aae_ckpt());

    std::string appearance_hash = file_hash_hex(paths.joint_ckpt());
    trainer::JointSnapshot site; // keeps the override alive
    const appearance::AppearanceModel* app = &joint.models.appearance;
    if (!site_appearance.empty()) {
        site = trainer::load_joint(site_appearance);
        app = &site.models.appearance;
        appearance_hash = file_hash_hex(site_appearance);
    }

    Volume atlas = dataio::load_volume(atlas_path);
    voxelcore::SegmentationMap atlas_seg = dataio::load_labels(atlas_seg_path);
    if (atlas.data.shape != atlas_seg.labels.shape)
        throw DataError("atlas volume and labels have different shapes");

    synth::GenerateConfig gen = cfg.generate;
    gen.count = n > 0 ? n : gen.count;
    gen.seed = seed;
    const std::string manifest = synth::generate_dataset(
        gen, out, atlas, atlas_seg, *app, aae, appearance_hash, file_hash_hex(paths.aae_ckpt()));
    std::cout << "wrote " << gen.count << " pairs, manifest " << manifest << "\n";
    return 0;
}

int cmd_train_unet(const config::PipelineConfig& cfg, const std::string& data,
                   const std::string& out, int limit) {
    auto paths = make_run_dir(out, cfg);
    std::vector<Volume> images;
    std::vector<voxelcore::SegmentationMap> labels;
    int classes = 0;
    if (fs::exists(data + "/manifest.jsonl")) {
        synth::GeneratedDataset ds = synth::load_generated(data, limit);
        images = std::move(ds.images);
        labels = std::move(ds.labels);
        classes = labels.front().num_classes;
    } else {
        auto lc = load_cohort_for(cfg, data);
        classes = lc.cohort.num_classes;
        for (size_t k = 0; k < lc.split.train.size(); ++k) {
            if (limit > 0 && static_cast<int>(images.size()) >= limit) break;
            const auto& item = lc.cohort.items[static_cast<size_t>(lc.split.train[k])];
            images.push_back(lc.train_vols[k]);
            labels.push_back(dataio::load_cohort_labels(data, item, classes));
        }
    }
    segnet::UnetConfig ucfg = cfg.unet;
    ucfg.num_classes = resolved_classes(cfg, classes);
    Rng rng = Rng::derive(cfg.unet_train.seed, "unet-init");
    segnet::Unet model(ucfg, rng);
    auto res = segnet::unet_train(model, cfg.unet_train, images, labels);
    segnet::save_unet(paths.unet_ckpt(), model, true,
                      {{"pairs", images.size()}, {"best_val_dice", res.best_val_dice}});
    trainer::MetricsWriter mw(paths.metrics(), true);
    for (size_t i = 0; i < res.loss_curve.size(); i += static_cast<size_t>(cfg.unet_train.metrics_every))
        mw.write("unet", static_cast<int>(i), "loss", res.loss_curve[i]);
    std::cout << "train-unet finished after " << res.loss_curve.size() << " steps on "
              << images.size() << " pairs\n";
    return 0;
}

int cmd_evaluate(const config::PipelineConfig& cfg, const std::string& model_path,
                 const std::string& data, const std::string& out_csv) {
    std::string ckpt = model_path;
    if (fs::is_directory(ckpt)) ckpt = pipeline::RunPaths{model_path}.unet_ckpt();
    segnet::Unet model = segnet::load_unet(ckpt);
    auto lc = load_cohort_for(cfg, data);
    check(!lc.test_vols.empty(), "evaluate: cohort test split is empty");
    segnet::DiceReport rep = segnet::evaluate(model, lc.test_vols, lc.test_segs);
    std::cout << segnet::format_dice_table(rep);
    if (!out_csv.empty()) segnet::write_dice_csv(out_csv, rep);
    return 0;
}

int cmd_export_embeddings(const std::string& models_dir, const std::string& data,
                          const std::string& out_csv) {
    pipeline::RunPaths paths{models_dir};
    style::StyleEncoder enc;
    if (fs::exists(paths.joint_ckpt())) {
        enc = trainer::load_joint(paths.joint_ckpt()).models.query;
    } else {
        require_checkpoint(paths.style_ckpt(), "pretrain-style");
        Checkpoint ck = read_checkpoint(paths.style_ckpt());
        Rng dummy(0);
        enc = style::StyleEncoder(
            style::StyleEncoderConfig::from_json(ck.meta.at("encoder_config")), dummy);
        ad::ParamMap pm;
        enc.collect(pm, "query");
        load_params(pm, ck);
    }
    dataio::Cohort cohort = dataio::read_cohort(data);
    std::ofstream os(out_csv, std::ios::trunc);
    if (!os) throw DataError("cannot write embeddings csv: " + out_csv);
    os << "id";
    for (int k = 0; k < enc.config().style_dim; ++k) os << ",v" << k;
    os << "\n";
    for (const auto& item : cohort.items) {
        Volume v = dataio::load_cohort_volume(data, item);
        style::StyleCode code = style::encode_style(enc, v, item.id);
        os << item.id;
        char buf[40];
        for (int64_t k = 0; k < code.vector.numel(); ++k) {
            std::snprintf(buf, sizeof(buf), "%.12g", code.vector.data[static_cast<size_t>(k)]);
            os << "," << buf;
        }
        os << "\n";
    }
    std::cout << "wrote " << cohort.items.size() << " embeddings to " << out_csv << "\n";
    return 0;
}

int cmd_interpolate_flow(const std::string& models_dir, const std::string& atlas_path,
                         const std::string& atlas_seg_path, int steps, uint64_t seed,
                         const std::string& out) {
    if (steps < 2) throw UsageError("interpolate-flow: need --steps >= 2");
    pipeline::RunPaths paths{models_dir};
    require_checkpoint(paths.joint_ckpt(), "train-joint");
    require_checkpoint(paths.aae_ckpt(), "train-aae");
    trainer::JointSnapshot joint = trainer::load_joint(paths.joint_ckpt());
    flowaae::FlowAae aae = trainer::load_aae(paths.aae_ckpt());
    Volume atlas = dataio::load_volume(atlas_path);
    voxelcore::SegmentationMap atlas_seg = dataio::load_labels(atlas_seg_path);

    Rng rng = Rng::derive(seed, "interpolate");
    flowaae::FlowCode a, b;
    a.vector = Tensor({aae.config().latent_dim});
    b.vector = Tensor({aae.config().latent_dim});
    for (auto& v : a.vector.data) v = rng.normal();
    for (auto& v : b.vector.data) v = rng.normal();
    Tensor style_t({joint.models.appearance.config().style_dim});
    for (auto& v : style_t.data) v = rng.normal();
    style::StyleCode sc;
    sc.vector = style_t;
    Volume styled = appearance::apply_style(joint.models.appearance, atlas, sc);

    fs::create_directories(out);
    for (int k = 0; k < steps; ++k) {
        const real alpha = static_cast<real>(k) / (steps - 1);
        flowaae::FlowCode c = flowaae::interpolate_codes(a, b, alpha);
        voxelcore::FlowField flow = flowaae::decode_flow(aae, c);
        Volume img = voxelcore::warp_volume(styled, flow);
        voxelcore::SegmentationMap seg = voxelcore::warp_labels(atlas_seg, flow);
        char id[16];
        std::snprintf(id, sizeof(id), "%02d", k);
        dataio::save_volume(out + "/interp_" + std::string(id) + "_vol.nii.gz", img);
        dataio::save_labels(out + "/interp_" + std::string(id) + "_seg.nii.gz", seg);
    }
    std::cout << "wrote " << steps << " interpolated pairs to " << out << "\n";
    return 0;
}

int cmd_sweep(const config::PipelineConfig& cfg, const std::string& data, const std::string& out,
              const std::vector<std::string>& point_specs) {
    auto paths = make_run_dir(out, cfg);
    require_checkpoint(paths.t_ckpt(), "pretrain-t");
    require_checkpoint(paths.style_ckpt(), "pretrain-style");
    auto lc = load_cohort_for(cfg, data);

    std::vector<trainer::SweepPoint> grid;
    if (point_specs.empty()) {
        grid.push_back({cfg.train.lambda1, cfg.train.lambda2, cfg.train.lambda3});
    } else {
        for (const auto& spec : point_specs) {
            double l1, l2, l3;
            if (std::sscanf(spec.c_str(), "%lf,%lf,%lf", &l1, &l2, &l3) != 3)
                throw UsageError("bad --point '" + spec + "'; expected lambda1,lambda2,lambda3");
            grid.push_back({l1, l2, l3});
        }
    }

    trainer::JointPhaseArgs args;
    args.appearance_cfg = cfg.appearance;
    args.flow_cfg = cfg.flow_model;
    args.ssim = cfg.ssim;
    args.t_ckpt = paths.t_ckpt();
    args.style_ckpt = paths.style_ckpt();

    // Score on the validation split (labels are available on phantom cohorts).
    std::vector<Volume> val_vols;
    std::vector<voxelcore::SegmentationMap> val_segs;
    for (int idx : lc.split.val) {
        val_vols.push_back(dataio::load_cohort_volume(data, lc.cohort.items[static_cast<size_t>(idx)]));
        val_segs.push_back(dataio::load_cohort_labels(data, lc.cohort.items[static_cast<size_t>(idx)],
                                                      lc.cohort.num_classes));
    }
    check(!val_vols.empty(), "sweep: cohort validation split is empty");

    trainer::SweepHooks hooks;
    hooks.reg_dice = [&](const trainer::JointModels& models) {
        return pipeline::styled_registration_dice(models, lc.train_data.atlas,
                                                  lc.train_data.atlas_seg, val_vols, val_segs);
    };
    hooks.sup_dice = [&](const trainer::JointModels& models, uint64_t seed) {
        // train a small AAE for this point, generate, train a U-Net, score it
        const std::string tmp = out + "/sweep_tmp";
        fs::create_directories(tmp);
        trainer::TrainConfig tcfg = cfg.train;
        tcfg.seed = seed;
        const std::string joint_tmp = tmp + "/joint.ckpt";
        {
            Checkpoint ck;
            ck.meta["encoder_config"] = models.query.config().to_json();
            ck.meta["disc_config"] = models.d_style.config().to_json();
            ck.meta["appearance_config"] = models.appearance.config().to_json();
            ck.meta["flow_config"] = models.flow_model.config().to_json();
            ck.meta["queue_capacity"] = cfg.train.queue_capacity;
            ck.meta["trained"] = true;
            ck.meta["step"] = cfg.train.steps_joint;
            ad::ParamMap pm;
            models.query.collect(pm, "query");
            models.key.collect(pm, "key");
            models.d_style.collect(pm, "d_style");
            models.appearance.collect(pm, "appearance");
            models.flow_model.collect(pm, "flow");
            save_params(pm, ck);
            style::KeyQueue stub(1, models.query.config().style_dim);
            Tensor unit({1, models.query.config().style_dim});
            unit.data[0] = 1.0;
            stub.push(unit);
            ck.tensors.emplace_back("queue", stub.serialize());
            write_checkpoint(joint_tmp, ck);
        }
        trainer::run_train_aae(tcfg, cfg.aae, lc.train_data, joint_tmp, tmp + "/aae.ckpt", nullptr,
                               false);
        flowaae::FlowAae aae = trainer::load_aae(tmp + "/aae.ckpt");
        synth::GenerateConfig gen = cfg.generate;
        gen.seed = seed;
        synth::generate_dataset(gen, tmp + "/gen", lc.train_data.atlas, lc.train_data.atlas_seg,
                                models.appearance, aae, "sweep", "sweep");
        synth::GeneratedDataset ds = synth::load_generated(tmp + "/gen");
        segnet::UnetConfig ucfg = cfg.unet;
        ucfg.num_classes = resolved_classes(cfg, lc.cohort.num_classes);
        Rng rng = Rng::derive(seed, "sweep-unet");
        segnet::Unet unet(ucfg, rng);
        segnet::UnetTrainConfig utc = cfg.unet_train;
        utc.seed = seed;
        segnet::unet_train(unet, utc, ds.images, ds.labels);
        segnet::DiceReport rep = segnet::evaluate(unet, val_vols, val_segs);
        fs::remove_all(tmp);
        return rep.mean;
    };

    auto rows = trainer::sweep(cfg.train, args, lc.train_data, grid, out + "/points", hooks);
    std::ofstream os(out + "/sweep.csv", std::ios::trunc);
    if (!os) throw DataError("cannot write sweep report");
    os << "lambda1,lambda2,lambda3,reg_dice,sup_dice,status,error\n";
    for (const auto& row : rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%g,%g,%g,%s,%s,%s,", row.point.lambda1, row.point.lambda2,
                      row.point.lambda3, row.ok ? fmt_pct(row.reg_dice).c_str() : "",
                      row.ok ? fmt_pct(row.sup_dice).c_str() : "", row.ok ? "ok" : "failed");
        os << buf << (row.ok ? "" : row.error) << "\n";
        std::cout << buf << (row.ok ? "" : row.error) << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"atlasgen: one-shot atlas-based synthesis of labeled 3D volumes"};
    app.require_subcommand(1);
    GlobalArgs g;
    auto add_config_opts = [&g](CLI::App* sub) {
        sub->add_option("--config", g.config_path, "INI config file");
        sub->add_option("--preset", g.preset, "base defaults: desk (CPU-sized) or full")
            ->check(CLI::IsMember({"desk", "full"}));
        sub->add_option("--set", g.overrides, "config override section.key=value (repeatable)");
    };

    auto* ph = app.add_subcommand("phantom", "generate a procedural phantom cohort");
    add_config_opts(ph);
    int ph_n = 0, ph_families = 0;
    double ph_spread = -1.0;
    uint64_t ph_seed = 0;
    std::string ph_out;
    ph->add_option("--n", ph_n, "number of patients")->required();
    ph->add_option("--families", ph_families, "number of style families");
    ph->add_option("--spread", ph_spread, "geometry spread in voxels");
    ph->add_option("--seed", ph_seed, "rng seed")->required();
    ph->add_option("--out", ph_out, "output cohort directory")->required();

    std::string tr_data, tr_out;
    bool tr_resume = false, tr_force = false;
    auto add_train_flags = [&](CLI::App* sub) {
        sub->add_option("--data", tr_data, "cohort directory")->required();
        sub->add_option("--out", tr_out, "run directory")->required();
        sub->add_flag("--resume", tr_resume, "continue from the phase checkpoint");
    };
    auto* pt = app.add_subcommand("pretrain-t", "pre-train the positive-key spatial transformer");
    add_config_opts(pt);
    add_train_flags(pt);
    auto* ps = app.add_subcommand("pretrain-style", "pre-train the style encoder (contrastive)");
    add_config_opts(ps);
    add_train_flags(ps);
    auto* tj = app.add_subcommand("train-joint", "jointly train style, appearance and flow");
    add_config_opts(tj);
    add_train_flags(tj);
    tj->add_flag("--force", tr_force, "allow running without a style pre-training checkpoint");
    auto* ta = app.add_subcommand("train-aae", "train the flow adversarial autoencoder");
    add_config_opts(ta);
    add_train_flags(ta);

    auto* gen = app.add_subcommand("generate", "sample image-segmentation pairs from the priors");
    add_config_opts(gen);
    int gen_n = 0;
    uint64_t gen_seed = 0;
    std::string gen_models, gen_atlas, gen_atlas_seg, gen_site, gen_out;
    gen->add_option("--n", gen_n, "number of pairs");
    gen->add_option("--models", gen_models, "run directory with joint + aae checkpoints")->required();
    gen->add_option("--atlas", gen_atlas, "atlas volume (.nii/.nii.gz)")->required();
    gen->add_option("--atlas-seg", gen_atlas_seg, "atlas labels")->required();
    gen->add_option("--site-appearance", gen_site, "cross-site appearance checkpoint (joint.ckpt)");
    gen->add_option("--seed", gen_seed, "rng seed")->required();
    gen->add_option("--out", gen_out, "output dataset directory")->required();

    auto* tu = app.add_subcommand("train-unet", "train the downstream 3D U-Net");
    add_config_opts(tu);
    std::string tu_data, tu_out;
    int tu_limit = 0;
    tu->add_option("--data", tu_data, "generated dataset or labeled cohort directory")->required();
    tu->add_option("--out", tu_out, "run directory")->required();
    tu->add_option("--limit", tu_limit, "use only the first N pairs");

    auto* ev = app.add_subcommand("evaluate", "per-structure Dice of a U-Net on a cohort test split");
    add_config_opts(ev);
    std::string ev_model, ev_data, ev_csv;
    ev->add_option("--model", ev_model, "unet checkpoint or its run directory")->required();
    ev->add_option("--data", ev_data, "labeled cohort directory")->required();
    ev->add_option("--out", ev_csv, "dice csv path");

    auto* ee = app.add_subcommand("export-embeddings", "style codes of every cohort volume");
    add_config_opts(ee);
    std::string ee_models, ee_data, ee_out;
    ee->add_option("--models", ee_models, "run directory with style/joint checkpoint")->required();
    ee->add_option("--data", ee_data, "cohort directory")->required();
    ee->add_option("--out", ee_out, "output csv")->required();

    auto* ifc = app.add_subcommand("interpolate-flow", "linear walk between two flow codes");
    add_config_opts(ifc);
    std::string if_models, if_atlas, if_atlas_seg, if_out;
    int if_steps = 5;
    uint64_t if_seed = 0;
    ifc->add_option("--models", if_models, "run directory")->required();
    ifc->add_option("--atlas", if_atlas, "atlas volume")->required();
    ifc->add_option("--atlas-seg", if_atlas_seg, "atlas labels")->required();
    ifc->add_option("--steps", if_steps, "number of interpolation steps");
    ifc->add_option("--seed", if_seed, "rng seed")->required();
    ifc->add_option("--out", if_out, "output directory")->required();

    auto* sw = app.add_subcommand("sweep", "loss-weight sensitivity sweep");
    add_config_opts(sw);
    std::string sw_data, sw_out;
    std::vector<std::string> sw_points;
    sw->add_option("--data", sw_data, "cohort directory")->required();
    sw->add_option("--out", sw_out, "run directory (needs t+style checkpoints)")->required();
    sw->add_option("--point", sw_points, "grid point lambda1,lambda2,lambda3 (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        config::PipelineConfig cfg = effective_config(g);
        if (ph->parsed()) {
            if (ph_families > 0) cfg.phantom_families = ph_families;
            if (ph_spread >= 0) cfg.phantom_spread = ph_spread;
            return cmd_phantom(cfg, ph_n, cfg.phantom_families, cfg.phantom_spread, ph_seed, ph_out);
        }
        if (pt->parsed()) return cmd_pretrain_t(cfg, tr_data, tr_out, tr_resume);
        if (ps->parsed()) return cmd_pretrain_style(cfg, tr_data, tr_out, tr_resume);
        if (tj->parsed()) return cmd_train_joint(cfg, tr_data, tr_out, tr_resume, tr_force);
        if (ta->parsed()) return cmd_train_aae(cfg, tr_data, tr_out, tr_resume);
        if (gen->parsed())
            return cmd_generate(cfg, gen_models, gen_n, gen_seed, gen_atlas, gen_atlas_seg,
                                gen_site, gen_out);
        if (tu->parsed()) return cmd_train_unet(cfg, tu_data, tu_out, tu_limit);
        if (ev->parsed()) return cmd_evaluate(cfg, ev_model, ev_data, ev_csv);
        if (ee->parsed()) return cmd_export_embeddings(ee_models, ee_data, ee_out);
        if (ifc->parsed())
            return cmd_interpolate_flow(if_models, if_atlas, if_atlas_seg, if_steps, if_seed,
                                        if_out);
        if (sw->parsed()) return cmd_sweep(cfg, sw_data, sw_out, sw_points);
        throw UsageError("no subcommand selected");
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}

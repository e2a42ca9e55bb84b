#include "atlasgen/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

namespace atlasgen {
namespace trainer {

using namespace ad;
using style::KeyQueue;
using style::StyleEncoder;

namespace {

std::string fmt_real(real v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return std::string(buf);
}

Tensor normalize_rows(const Tensor& t) {
    Tensor out = t;
    const int N = t.dim(0), K = t.dim(1);
    for (int n = 0; n < N; ++n) {
        real ss = 0.0;
        for (int k = 0; k < K; ++k) {
            const real v = t.data[static_cast<size_t>(n) * K + k];
            ss += v * v;
        }
        const real inv = 1.0 / std::sqrt(ss + 1e-12);
        for (int k = 0; k < K; ++k) out.data[static_cast<size_t>(n) * K + k] *= inv;
    }
    return out;
}

Tensor batch_of(const std::vector<Volume>& vols, const std::vector<int>& idx) {
    std::vector<const Volume*> ptrs;
    ptrs.reserve(idx.size());
    for (int i : idx) ptrs.push_back(&vols[static_cast<size_t>(i)]);
    return voxelcore::volume_batch(ptrs);
}

Tensor repeat_volume(const Volume& v, int n) {
    std::vector<const Volume*> ptrs(static_cast<size_t>(n), &v);
    return voxelcore::volume_batch(ptrs);
}

// Warp each query toward its target with the frozen transformer (no tape).
Tensor make_positive_keys(const flow::FlowModel& t_model, const Tensor& queries,
                          const Tensor& targets) {
    NoGradGuard ng;
    Var delta = t_model.forward(constant(queries), constant(targets));
    return warp3d(constant(queries), delta, WarpMode::Trilinear).value();
}

Tensor sample_prior(Rng& rng, int n, int dim) {
    Tensor t({n, dim});
    for (auto& v : t.data) v = rng.normal();
    return t;
}

void ensure_parent_dir(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

} // namespace

MetricsWriter::MetricsWriter(const std::string& path, bool append) {
    ensure_parent_dir(path);
    const bool exists = std::filesystem::exists(path);
    os_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!os_) throw DataError("cannot open metrics file: " + path);
    if (!append || !exists) os_ << "phase,step,name,value\n";
}

void MetricsWriter::write(const std::string& phase, int step, const std::string& name, real value) {
    if (!os_.is_open()) return;
    os_ << phase << "," << step << "," << name << "," << fmt_real(value) << "\n";
    os_.flush();
}

Optimizers build_optimizers(const TrainConfig& cfg, const JointModels& models) {
    std::vector<Var> model_params;
    for (auto& v : models.query.parameters()) model_params.push_back(v);
    for (auto& v : models.appearance.parameters()) model_params.push_back(v);
    for (auto& v : models.flow_model.parameters()) model_params.push_back(v);
    std::vector<Var> disc_params = models.d_style.parameters();
    Optimizers opts;
    opts.model = Adam(std::move(model_params), {cfg.lr, cfg.model_beta1, cfg.model_beta2, 1e-8});
    opts.disc = Adam(std::move(disc_params), {cfg.lr, cfg.disc_beta1, cfg.disc_beta2, 1e-8});
    return opts;
}

// ------------------------------------------------------------ style pretrain

StyleStepMetrics pretrain_style_step(const TrainConfig& cfg, StyleEncoder& query,
                                     StyleEncoder& key, style::LatentDiscriminator& d_style,
                                     KeyQueue& queue, Optimizers& opts, const Tensor& query_batch,
                                     const Tensor& kpos_batch, Rng& noise_rng) {
    StyleStepMetrics m;
    Tensor zk;
    {
        NoGradGuard ng;
        zk = key.forward(constant(kpos_batch)).value();
    }
    const Tensor zk_cl = cfg.normalize_codes ? normalize_rows(zk) : zk;

    Var zq_raw = query.forward(constant(query_batch));
    Var zq_cl = cfg.normalize_codes ? l2_normalize_rows(zq_raw) : zq_raw;
    Var cl = style::contrastive_loss(zq_cl, constant(zk_cl), queue, cfg.tau);
    Var adv = voxelcore::lsgan_generator_loss(d_style.forward(zq_raw));
    Var total = add(mul_scalar(cl, cfg.lambda_cl), mul_scalar(adv, cfg.lambda3));
    m.vol_cl = cl.item();
    m.adv_gen = adv.item();
    m.total = total.item();
    if (!std::isfinite(m.total))
        throw NumericalError("style pre-training loss is not finite (vol_cl=" + fmt_real(m.vol_cl) +
                             ", adv=" + fmt_real(m.adv_gen) + ")");
    const Tensor zq_value = zq_raw.value();
    opts.model.zero_grad();
    backward(total);
    if (cfg.grad_clip > 0) opts.model.clip_global_norm(cfg.grad_clip);
    opts.model.step();

    Var d_real = d_style.forward(
        constant(sample_prior(noise_rng, query_batch.dim(0), query.config().style_dim)));
    Var d_fake = d_style.forward(constant(zq_value));
    Var d_loss = voxelcore::lsgan_discriminator_loss(d_real, d_fake);
    m.d_loss = d_loss.item();
    if (!std::isfinite(m.d_loss)) throw NumericalError("style discriminator loss is not finite");
    opts.disc.zero_grad();
    backward(d_loss);
    opts.disc.step();

    style::momentum_update(query, key, cfg.momentum);
    style::enqueue_keys(queue, zk_cl);
    return m;
}

// ------------------------------------------------------------------ joint step

JointStepMetrics joint_train_step(const TrainConfig& cfg, JointModels& models, Optimizers& opts,
                                  KeyQueue& queue, const Tensor& source_batch,
                                  const Tensor& target_batch, const Tensor& kpos_batch,
                                  Rng& noise_rng, const voxelcore::SsimOptions& ssim) {
    JointStepMetrics m;
    Var s = constant(source_batch);
    Var t = constant(target_batch);

    Var zt_raw = models.query.forward(t);
    Var zs_raw = models.query.forward(s);
    Var zt_app = cfg.freeze_style_in_app ? detach(zt_raw) : zt_raw;
    Var zs_app = cfg.freeze_style_in_app ? detach(zs_raw) : zs_raw;

    Var s_tilde = models.appearance.forward(s, zt_app);

    Tensor zk;
    {
        NoGradGuard ng;
        zk = models.key.forward(constant(kpos_batch)).value();
    }
    const Tensor zk_cl = cfg.normalize_codes ? normalize_rows(zk) : zk;

    Var cl;
    if (cfg.lambda_cl != 0.0) {
        Var zq_cl = cfg.normalize_codes ? l2_normalize_rows(zt_raw) : zt_raw;
        cl = style::contrastive_loss(zq_cl, constant(zk_cl), queue, cfg.tau);
    } else {
        cl = constant(Tensor::scalar(0.0));
    }

    Var cyc = appearance::style_cycle_loss(s, s_tilde, models.appearance, zs_app, ssim);
    Var idl = appearance::style_identity_loss(s, models.appearance, zs_app, ssim);
    Var app = add(cyc, idl);

    Var delta = models.flow_model.forward(s_tilde, t);
    Var warped = warp3d(s_tilde, delta, WarpMode::Trilinear);
    Var recon = voxelcore::ssim_l1_loss(t, warped, ssim);
    Var reg = flow_grad_l1(delta);
    Var flow_total = add(recon, mul_scalar(reg, cfg.lambda_reg));

    Var adv = voxelcore::lsgan_generator_loss(models.d_style.forward(zt_raw));

    Var total = add(add(mul_scalar(cl, cfg.lambda_cl), mul_scalar(app, cfg.lambda1)),
                    add(mul_scalar(flow_total, cfg.lambda2), mul_scalar(adv, cfg.lambda3)));

    m.vol_cl = cl.item();
    m.app = app.item();
    m.flow_recon = recon.item();
    m.flow_reg = reg.item();
    m.flow_total = flow_total.item();
    m.adv_gen = adv.item();
    m.total = total.item();
    if (!std::isfinite(m.total))
        throw NumericalError("joint loss is not finite (vol_cl=" + fmt_real(m.vol_cl) +
                             ", app=" + fmt_real(m.app) + ", flow=" + fmt_real(m.flow_total) +
                             ", adv=" + fmt_real(m.adv_gen) + ")");

    const Tensor zt_value = zt_raw.value();
    opts.model.zero_grad();
    backward(total);
    if (cfg.grad_clip > 0) opts.model.clip_global_norm(cfg.grad_clip);
    opts.model.step();

    Var d_real = models.d_style.forward(
        constant(sample_prior(noise_rng, target_batch.dim(0), models.query.config().style_dim)));
    Var d_fake = models.d_style.forward(constant(zt_value));
    Var d_loss = voxelcore::lsgan_discriminator_loss(d_real, d_fake);
    m.d_loss = d_loss.item();
    if (!std::isfinite(m.d_loss)) throw NumericalError("style discriminator loss is not finite");
    opts.disc.zero_grad();
    backward(d_loss);
    opts.disc.step();

    style::momentum_update(models.query, models.key, cfg.momentum);
    style::enqueue_keys(queue, zk_cl);
    return m;
}

// --------------------------------------------------------------------- phases

namespace {

struct PhaseState {
    int step = 0;
    Rng rng;
};

void save_phase_meta(nlohmann::json& meta, const std::string& kind, const TrainConfig& cfg,
                     const PhaseState& st, int steps_target, bool trained) {
    meta["kind"] = kind;
    meta["step"] = st.step;
    meta["steps_target"] = steps_target;
    meta["trained"] = trained;
    meta["rng_state"] = st.rng.save_state();
    meta["seed"] = cfg.seed;
}

std::pair<int, int> sample_pair_indices(Rng& rng, int n) {
    const int a = static_cast<int>(rng.uniform_int(n));
    int b = static_cast<int>(rng.uniform_int(n));
    while (n > 1 && b == a) b = static_cast<int>(rng.uniform_int(n));
    return {a, b};
}

} // namespace

PhaseOutcome run_pretrain_t(const TrainConfig& cfg, const flow::FlowModelConfig& t_cfg,
                            const TrainData& data, const std::string& ckpt_path,
                            MetricsWriter* metrics, bool resume) {
    check(!data.train.empty(), "pretrain_t: empty training set");
    Rng init_rng = Rng::derive(cfg.seed, "t-init");
    flow::FlowModel model(t_cfg, init_rng);
    Adam opt(model.parameters(), {cfg.lr, cfg.model_beta1, cfg.model_beta2, 1e-8});
    PhaseState st;
    st.rng = Rng::derive(cfg.seed, "t-loop");

    if (resume && std::filesystem::exists(ckpt_path)) {
        Checkpoint ck = read_checkpoint(ckpt_path);
        check(ck.meta.at("config") == t_cfg.to_json(),
              "pretrain_t resume: checkpoint architecture differs from the configured one");
        ParamMap pm;
        model.collect(pm, "t");
        load_params(pm, ck);
        opt.load_state("opt", ck.tensors);
        st.step = ck.meta.at("step").get<int>();
        st.rng.load_state(ck.meta.at("rng_state").get<std::string>());
    }

    auto save = [&](bool trained) {
        Checkpoint ck;
        ck.meta["config"] = t_cfg.to_json();
        save_phase_meta(ck.meta, "t_model", cfg, st, cfg.steps_pretrain_t, trained);
        ParamMap pm;
        model.collect(pm, "t");
        save_params(pm, ck);
        opt.save_state("opt", ck.tensors);
        ensure_parent_dir(ckpt_path);
        write_checkpoint(ckpt_path, ck);
    };

    PhaseOutcome out;
    const int n = static_cast<int>(data.train.size());
    for (; st.step < cfg.steps_pretrain_t; ++st.step) {
        std::vector<int> mi, fi;
        for (int b = 0; b < cfg.batch_joint; ++b) {
            auto [a, c] = sample_pair_indices(st.rng, n);
            mi.push_back(a);
            fi.push_back(c);
        }
        flow::PretrainStepResult r;
        try {
            r = flow::pretrain_T_step(model, opt, batch_of(data.train, mi),
                                      batch_of(data.train, fi), cfg.ncc_window, cfg.t_smooth);
        } catch (const NumericalError& e) {
            throw NumericalError("pretrain_t step " + std::to_string(st.step) + ": " + e.what());
        }
        if (metrics && st.step % cfg.metrics_every == 0) {
            metrics->write("pretrain_t", st.step, "loss", r.loss);
            metrics->write("pretrain_t", st.step, "ncc", r.ncc);
            metrics->write("pretrain_t", st.step, "smooth", r.smooth);
        }
        out.final_metrics["loss"] = r.loss;
        if (cfg.checkpoint_every > 0 && (st.step + 1) % cfg.checkpoint_every == 0 &&
            st.step + 1 < cfg.steps_pretrain_t) {
            ++st.step;
            save(false);
            --st.step;
        }
    }
    save(true);
    out.steps = st.step;
    return out;
}

flow::FlowModel load_t_model(const std::string& ckpt_path, bool require_finished) {
    Checkpoint ck = read_checkpoint(ckpt_path);
    if (require_finished) require_trained(ck, "spatial transformer (" + ckpt_path + ")");
    Rng dummy(0);
    flow::FlowModel model(flow::FlowModelConfig::from_json(ck.meta.at("config")), dummy);
    ParamMap pm;
    model.collect(pm, "t");
    load_params(pm, ck);
    return model;
}

PhaseOutcome run_pretrain_style(const TrainConfig& cfg, const style::StyleEncoderConfig& enc_cfg,
                                const style::LatentDiscriminatorConfig& d_cfg,
                                const TrainData& data, const std::string& t_ckpt,
                                const std::string& ckpt_path, MetricsWriter* metrics, bool resume) {
    check(!data.train.empty(), "pretrain_style: empty training set");
    flow::FlowModel t_model = load_t_model(t_ckpt);

    Rng init_rng = Rng::derive(cfg.seed, "style-init");
    StyleEncoder query(enc_cfg, init_rng);
    StyleEncoder key(enc_cfg, init_rng);
    key.copy_from(query); // key encoder starts as an exact copy
    style::LatentDiscriminatorConfig dc = d_cfg;
    dc.in_dim = enc_cfg.style_dim;
    style::LatentDiscriminator d_style(dc, init_rng);

    Optimizers opts;
    opts.model = Adam(query.parameters(), {cfg.lr, cfg.model_beta1, cfg.model_beta2, 1e-8});
    opts.disc = Adam(d_style.parameters(), {cfg.lr, cfg.disc_beta1, cfg.disc_beta2, 1e-8});

    KeyQueue queue(cfg.queue_capacity, enc_cfg.style_dim);
    PhaseState st;
    st.rng = Rng::derive(cfg.seed, "style-loop");
    const int n = static_cast<int>(data.train.size());

    if (resume && std::filesystem::exists(ckpt_path)) {
        Checkpoint ck = read_checkpoint(ckpt_path);
        ParamMap pm;
        query.collect(pm, "query");
        key.collect(pm, "key");
        d_style.collect(pm, "d_style");
        load_params(pm, ck);
        opts.model.load_state("opt_model", ck.tensors);
        opts.disc.load_state("opt_disc", ck.tensors);
        const Tensor* qt = ck.find("queue");
        check(qt != nullptr, "style checkpoint is missing the key queue");
        queue = KeyQueue::deserialize(*qt, cfg.queue_capacity);
        st.step = ck.meta.at("step").get<int>();
        st.rng.load_state(ck.meta.at("rng_state").get<std::string>());
    } else {
        // Warm-fill the dictionary with key-encoder codes of randomly drawn
        // volumes so the step-0 logits are identically distributed.
        while (queue.size() < cfg.queue_capacity) {
            const int b = std::min(cfg.batch_pretrain, cfg.queue_capacity - queue.size());
            std::vector<int> idx;
            for (int i = 0; i < b; ++i) idx.push_back(static_cast<int>(st.rng.uniform_int(n)));
            NoGradGuard ng;
            Tensor codes = key.forward(constant(batch_of(data.train, idx))).value();
            style::enqueue_keys(queue, cfg.normalize_codes ? normalize_rows(codes) : codes);
        }
    }

    auto save = [&](bool trained) {
        Checkpoint ck;
        ck.meta["encoder_config"] = enc_cfg.to_json();
        ck.meta["disc_config"] = dc.to_json();
        ck.meta["queue_capacity"] = cfg.queue_capacity;
        save_phase_meta(ck.meta, "style", cfg, st, cfg.steps_pretrain_style, trained);
        ParamMap pm;
        query.collect(pm, "query");
        key.collect(pm, "key");
        d_style.collect(pm, "d_style");
        save_params(pm, ck);
        opts.model.save_state("opt_model", ck.tensors);
        opts.disc.save_state("opt_disc", ck.tensors);
        ck.tensors.emplace_back("queue", queue.serialize());
        ensure_parent_dir(ckpt_path);
        write_checkpoint(ckpt_path, ck);
    };

    PhaseOutcome out;
    for (; st.step < cfg.steps_pretrain_style; ++st.step) {
        std::vector<int> qi, ti;
        for (int b = 0; b < cfg.batch_pretrain; ++b) {
            auto [a, c] = sample_pair_indices(st.rng, n);
            qi.push_back(a);
            ti.push_back(c);
        }
        Tensor queries = batch_of(data.train, qi);
        Tensor kpos = make_positive_keys(t_model, queries, batch_of(data.train, ti));
        StyleStepMetrics m;
        try {
            m = pretrain_style_step(cfg, query, key, d_style, queue, opts, queries, kpos, st.rng);
        } catch (const NumericalError& e) {
            throw NumericalError("pretrain_style step " + std::to_string(st.step) + ": " +
                                 e.what());
        }
        if (metrics && st.step % cfg.metrics_every == 0) {
            metrics->write("pretrain_style", st.step, "vol_cl", m.vol_cl);
            metrics->write("pretrain_style", st.step, "adv_gen", m.adv_gen);
            metrics->write("pretrain_style", st.step, "d_loss", m.d_loss);
            metrics->write("pretrain_style", st.step, "total", m.total);
        }
        out.final_metrics["vol_cl"] = m.vol_cl;
        out.final_metrics["total"] = m.total;
        if (cfg.checkpoint_every > 0 && (st.step + 1) % cfg.checkpoint_every == 0 &&
            st.step + 1 < cfg.steps_pretrain_style) {
            ++st.step;
            save(false);
            --st.step;
        }
    }
    save(true);
    out.steps = st.step;
    return out;
}

PhaseOutcome run_joint(const TrainConfig& cfg, const JointPhaseArgs& args, const TrainData& data,
                       const std::string& ckpt_path, MetricsWriter* metrics, bool resume) {
    check(!data.train.empty(), "joint: empty training set");
    flow::FlowModel t_model = load_t_model(args.t_ckpt);

    JointModels models;
    Rng init_rng = Rng::derive(cfg.seed, "joint-init");
    style::StyleEncoderConfig enc_cfg;
    style::LatentDiscriminatorConfig d_cfg;
    KeyQueue queue;
    PhaseState st;
    st.rng = Rng::derive(cfg.seed, "joint-loop");
    const int n = static_cast<int>(data.train.size());

    if (!args.skip_style_pretrain) {
        Checkpoint sck = read_checkpoint(args.style_ckpt);
        require_trained(sck, "style pre-training (" + args.style_ckpt + ")");
        enc_cfg = style::StyleEncoderConfig::from_json(sck.meta.at("encoder_config"));
        d_cfg = style::LatentDiscriminatorConfig::from_json(sck.meta.at("disc_config"));
        Rng dummy(0);
        models.query = StyleEncoder(enc_cfg, dummy);
        models.key = StyleEncoder(enc_cfg, dummy);
        models.d_style = style::LatentDiscriminator(d_cfg, dummy);
        ParamMap pm;
        models.query.collect(pm, "query");
        models.key.collect(pm, "key");
        models.d_style.collect(pm, "d_style");
        load_params(pm, sck);
        const Tensor* qt = sck.find("queue");
        check(qt != nullptr, "style checkpoint is missing the key queue");
        queue = KeyQueue::deserialize(*qt, cfg.queue_capacity); // persists across phases
    } else {
        enc_cfg.style_dim = args.appearance_cfg.style_dim;
        enc_cfg.channels = {8, 16, 32};
        d_cfg.in_dim = enc_cfg.style_dim;
        models.query = StyleEncoder(enc_cfg, init_rng);
        models.key = StyleEncoder(enc_cfg, init_rng);
        models.key.copy_from(models.query);
        models.d_style = style::LatentDiscriminator(d_cfg, init_rng);
        queue = KeyQueue(cfg.queue_capacity, enc_cfg.style_dim);
        while (queue.size() < cfg.queue_capacity) {
            const int b = std::min(cfg.batch_pretrain, cfg.queue_capacity - queue.size());
            std::vector<int> idx;
            for (int i = 0; i < b; ++i) idx.push_back(static_cast<int>(st.rng.uniform_int(n)));
            NoGradGuard ng;
            Tensor codes = models.key.forward(constant(batch_of(data.train, idx))).value();
            style::enqueue_keys(queue, cfg.normalize_codes ? normalize_rows(codes) : codes);
        }
    }
    check(enc_cfg.style_dim == args.appearance_cfg.style_dim,
          "joint: appearance style_dim must match the style encoder");

    models.appearance = appearance::AppearanceModel(args.appearance_cfg, init_rng);
    models.flow_model = flow::FlowModel(args.flow_cfg, init_rng);
    if (cfg.init_flow_from_t) models.flow_model.copy_from(t_model);

    Optimizers opts = build_optimizers(cfg, models);

    if (resume && std::filesystem::exists(ckpt_path)) {
        Checkpoint ck = read_checkpoint(ckpt_path);
        ParamMap pm;
        models.query.collect(pm, "query");
        models.key.collect(pm, "key");
        models.d_style.collect(pm, "d_style");
        models.appearance.collect(pm, "appearance");
        models.flow_model.collect(pm, "flow");
        load_params(pm, ck);
        opts.model.load_state("opt_model", ck.tensors);
        opts.disc.load_state("opt_disc", ck.tensors);
        const Tensor* qt = ck.find("queue");
        check(qt != nullptr, "joint checkpoint is missing the key queue");
        queue = KeyQueue::deserialize(*qt, cfg.queue_capacity);
        st.step = ck.meta.at("step").get<int>();
        st.rng.load_state(ck.meta.at("rng_state").get<std::string>());
    }

    auto save = [&](bool trained) {
        Checkpoint ck;
        ck.meta["encoder_config"] = enc_cfg.to_json();
        ck.meta["disc_config"] = d_cfg.to_json();
        ck.meta["appearance_config"] = args.appearance_cfg.to_json();
        ck.meta["flow_config"] = args.flow_cfg.to_json();
        ck.meta["queue_capacity"] = cfg.queue_capacity;
        save_phase_meta(ck.meta, "joint", cfg, st, cfg.steps_joint, trained);
        ParamMap pm;
        models.query.collect(pm, "query");
        models.key.collect(pm, "key");
        models.d_style.collect(pm, "d_style");
        models.appearance.collect(pm, "appearance");
        models.flow_model.collect(pm, "flow");
        save_params(pm, ck);
        opts.model.save_state("opt_model", ck.tensors);
        opts.disc.save_state("opt_disc", ck.tensors);
        ck.tensors.emplace_back("queue", queue.serialize());
        ensure_parent_dir(ckpt_path);
        write_checkpoint(ckpt_path, ck);
    };

    PhaseOutcome out;
    for (; st.step < cfg.steps_joint; ++st.step) {
        std::vector<int> ti, si, ki;
        for (int b = 0; b < cfg.batch_joint; ++b) {
            const int t_idx = static_cast<int>(st.rng.uniform_int(n));
            ti.push_back(t_idx);
            if (cfg.random_source_pairs) {
                int s_idx = static_cast<int>(st.rng.uniform_int(n));
                while (n > 1 && s_idx == t_idx) s_idx = static_cast<int>(st.rng.uniform_int(n));
                si.push_back(s_idx);
            }
            int k_idx = static_cast<int>(st.rng.uniform_int(n));
            while (n > 1 && k_idx == t_idx) k_idx = static_cast<int>(st.rng.uniform_int(n));
            ki.push_back(k_idx);
        }
        Tensor targets = batch_of(data.train, ti);
        Tensor sources = cfg.random_source_pairs ? batch_of(data.train, si)
                                                 : repeat_volume(data.atlas, cfg.batch_joint);
        Tensor kpos = make_positive_keys(t_model, targets, batch_of(data.train, ki));
        JointStepMetrics m;
        try {
            m = joint_train_step(cfg, models, opts, queue, sources, targets, kpos, st.rng,
                                 args.ssim);
        } catch (const NumericalError& e) {
            throw NumericalError("joint step " + std::to_string(st.step) + ": " + e.what());
        }
        if (metrics && st.step % cfg.metrics_every == 0) {
            metrics->write("joint", st.step, "total", m.total);
            metrics->write("joint", st.step, "vol_cl", m.vol_cl);
            metrics->write("joint", st.step, "app", m.app);
            metrics->write("joint", st.step, "flow", m.flow_total);
            metrics->write("joint", st.step, "flow_recon", m.flow_recon);
            metrics->write("joint", st.step, "flow_reg", m.flow_reg);
            metrics->write("joint", st.step, "adv_gen", m.adv_gen);
            metrics->write("joint", st.step, "d_loss", m.d_loss);
        }
        out.final_metrics["total"] = m.total;
        out.final_metrics["flow_recon"] = m.flow_recon;
        out.final_metrics["app"] = m.app;
        if (cfg.checkpoint_every > 0 && (st.step + 1) % cfg.checkpoint_every == 0 &&
            st.step + 1 < cfg.steps_joint) {
            ++st.step;
            save(false);
            --st.step;
        }
    }
    save(true);
    out.steps = st.step;
    return out;
}

JointSnapshot load_joint(const std::string& ckpt_path, bool require_finished) {
    Checkpoint ck = read_checkpoint(ckpt_path);
    if (require_finished) require_trained(ck, "joint training (" + ckpt_path + ")");
    JointSnapshot snap;
    Rng dummy(0);
    const auto enc_cfg = style::StyleEncoderConfig::from_json(ck.meta.at("encoder_config"));
    snap.models.query = StyleEncoder(enc_cfg, dummy);
    snap.models.key = StyleEncoder(enc_cfg, dummy);
    snap.models.d_style = style::LatentDiscriminator(
        style::LatentDiscriminatorConfig::from_json(ck.meta.at("disc_config")), dummy);
    snap.models.appearance = appearance::AppearanceModel(
        appearance::AppearanceConfig::from_json(ck.meta.at("appearance_config")), dummy);
    snap.models.flow_model =
        flow::FlowModel(flow::FlowModelConfig::from_json(ck.meta.at("flow_config")), dummy);
    ParamMap pm;
    snap.models.query.collect(pm, "query");
    snap.models.key.collect(pm, "key");
    snap.models.d_style.collect(pm, "d_style");
    snap.models.appearance.collect(pm, "appearance");
    snap.models.flow_model.collect(pm, "flow");
    load_params(pm, ck);
    const Tensor* qt = ck.find("queue");
    check(qt != nullptr, "joint checkpoint is missing the key queue");
    snap.queue = KeyQueue::deserialize(*qt, ck.meta.value("queue_capacity", 256));
    snap.trained = ck.meta.value("trained", false);
    return snap;
}

PhaseOutcome run_train_aae(const TrainConfig& cfg, flowaae::FlowAaeConfig aae_cfg,
                           const TrainData& data, const std::string& joint_ckpt,
                           const std::string& ckpt_path, MetricsWriter* metrics, bool resume) {
    JointSnapshot joint = load_joint(joint_ckpt);
    const auto& shape = data.atlas.data.shape;
    aae_cfg.spatial_shape = shape;

    // Flow training set: base -> every training target, frozen joint models.
    std::vector<Tensor> flows;
    {
        NoGradGuard ng;
        for (const auto& t : data.train) {
            Var tv = constant(voxelcore::volume_batch(t));
            Var code = joint.models.query.forward(tv);
            Var s_tilde = joint.models.appearance.forward(
                constant(voxelcore::volume_batch(data.atlas)), code);
            Var delta = joint.models.flow_model.forward(s_tilde, tv);
            flows.push_back(delta.value()); // [1,3,D,H,W]
        }
    }
    const int n = static_cast<int>(flows.size());

    Rng init_rng = Rng::derive(cfg.seed, "aae-init");
    flowaae::FlowAae aae(aae_cfg, init_rng);
    Adam opt_ae(aae.autoencoder_parameters(), {cfg.lr, cfg.model_beta1, cfg.model_beta2, 1e-8});
    Adam opt_d(aae.discriminator_parameters(), {cfg.lr, cfg.disc_beta1, cfg.disc_beta2, 1e-8});
    PhaseState st;
    st.rng = Rng::derive(cfg.seed, "aae-loop");

    auto round_trip_l1 = [&]() {
        NoGradGuard ng;
        real total = 0.0;
        for (int i = 0; i < n; ++i) {
            Var f = constant(flows[static_cast<size_t>(i)]);
            Var rec = aae.decode(aae.encode(f));
            total += mean(abs_(sub(rec, f))).item();
        }
        return total / static_cast<real>(n);
    };
    real step0_l1 = -1.0;

    if (resume && std::filesystem::exists(ckpt_path)) {
        Checkpoint ck = read_checkpoint(ckpt_path);
        ParamMap pm;
        aae.collect_autoencoder(pm, "aae");
        aae.collect_discriminator(pm, "d_flow");
        load_params(pm, ck);
        opt_ae.load_state("opt_ae", ck.tensors);
        opt_d.load_state("opt_d", ck.tensors);
        st.step = ck.meta.at("step").get<int>();
        st.rng.load_state(ck.meta.at("rng_state").get<std::string>());
        step0_l1 = ck.meta.value("recon_l1_step0", -1.0);
    }
    if (step0_l1 < 0) step0_l1 = round_trip_l1();

    auto save = [&](bool trained) {
        Checkpoint ck;
        ck.meta["config"] = aae.config().to_json();
        save_phase_meta(ck.meta, "flow_aae", cfg, st, cfg.steps_aae, trained);
        ck.meta["recon_l1_step0"] = step0_l1;
        if (trained) {
            ck.meta["recon_l1_final"] = round_trip_l1();
            // aggregate prior-matching statistics over the training flows
            NoGradGuard ng;
            real mean_all = 0.0;
            std::vector<real> dim_mean(static_cast<size_t>(aae_cfg.latent_dim), 0.0);
            std::vector<real> dim_sq(static_cast<size_t>(aae_cfg.latent_dim), 0.0);
            for (int i = 0; i < n; ++i) {
                Tensor code = aae.encode(constant(flows[static_cast<size_t>(i)])).value();
                for (int k = 0; k < aae_cfg.latent_dim; ++k) {
                    const real v = code.data[static_cast<size_t>(k)];
                    mean_all += v;
                    dim_mean[static_cast<size_t>(k)] += v;
                    dim_sq[static_cast<size_t>(k)] += v * v;
                }
            }
            mean_all /= static_cast<real>(n) * aae_cfg.latent_dim;
            real var_mean = 0.0;
            for (int k = 0; k < aae_cfg.latent_dim; ++k) {
                const real mu = dim_mean[static_cast<size_t>(k)] / n;
                var_mean += dim_sq[static_cast<size_t>(k)] / n - mu * mu;
            }
            var_mean /= static_cast<real>(aae_cfg.latent_dim);
            ck.meta["code_mean"] = mean_all;
            ck.meta["code_var_mean"] = var_mean;
        }
        ParamMap pm;
        aae.collect_autoencoder(pm, "aae");
        aae.collect_discriminator(pm, "d_flow");
        save_params(pm, ck);
        opt_ae.save_state("opt_ae", ck.tensors);
        opt_d.save_state("opt_d", ck.tensors);
        ensure_parent_dir(ckpt_path);
        write_checkpoint(ckpt_path, ck);
    };

    PhaseOutcome out;
    for (; st.step < cfg.steps_aae; ++st.step) {
        const int b = std::min(cfg.aae_batch, n);
        Tensor batch({b, 3, shape[0], shape[1], shape[2]});
        const int64_t m = 3 * static_cast<int64_t>(shape[0]) * shape[1] * shape[2];
        for (int i = 0; i < b; ++i) {
            const int idx = static_cast<int>(st.rng.uniform_int(n));
            std::copy_n(flows[static_cast<size_t>(idx)].ptr(), m, batch.ptr() + i * m);
        }
        flowaae::AaeStepResult r;
        try {
            r = flowaae::aae_train_step(aae, opt_ae, opt_d, batch, cfg.aae_mu, st.rng);
        } catch (const NumericalError& e) {
            throw NumericalError("aae step " + std::to_string(st.step) + ": " + e.what());
        }
        if (metrics && st.step % cfg.metrics_every == 0) {
            metrics->write("aae", st.step, "recon_l1", r.recon_l1);
            metrics->write("aae", st.step, "adv_gen", r.adv_gen);
            metrics->write("aae", st.step, "d_loss", r.d_loss);
        }
        out.final_metrics["recon_l1"] = r.recon_l1;
        if (cfg.checkpoint_every > 0 && (st.step + 1) % cfg.checkpoint_every == 0 &&
            st.step + 1 < cfg.steps_aae) {
            ++st.step;
            save(false);
            --st.step;
        }
    }
    save(true);
    out.steps = st.step;
    out.final_metrics["recon_l1_step0"] = step0_l1;
    return out;
}

flowaae::FlowAae load_aae(const std::string& ckpt_path, bool require_finished) {
    Checkpoint ck = read_checkpoint(ckpt_path);
    if (require_finished) require_trained(ck, "flow AAE (" + ckpt_path + ")");
    Rng dummy(0);
    flowaae::FlowAae aae(flowaae::FlowAaeConfig::from_json(ck.meta.at("config")), dummy);
    ParamMap pm;
    aae.collect_autoencoder(pm, "aae");
    aae.collect_discriminator(pm, "d_flow");
    load_params(pm, ck);
    return aae;
}

std::vector<SweepRow> sweep(const TrainConfig& base_cfg, const JointPhaseArgs& args,
                            const TrainData& data, const std::vector<SweepPoint>& grid,
                            const std::string& work_dir, const SweepHooks& hooks) {
    check(!grid.empty(), "sweep: empty grid");
    std::filesystem::create_directories(work_dir);
    std::vector<SweepRow> rows;
    int point_idx = 0;
    for (const auto& point : grid) {
        SweepRow row;
        row.point = point;
        TrainConfig cfg = base_cfg;
        cfg.lambda1 = point.lambda1;
        cfg.lambda2 = point.lambda2;
        cfg.lambda3 = point.lambda3;
        cfg.seed = base_cfg.seed + static_cast<uint64_t>(point_idx);
        const std::string ckpt = work_dir + "/sweep_point_" + std::to_string(point_idx) + ".ckpt";
        try {
            run_joint(cfg, args, data, ckpt, nullptr, /*resume=*/false);
            JointSnapshot snap = load_joint(ckpt);
            row.reg_dice = hooks.reg_dice(snap.models);
            row.sup_dice = hooks.sup_dice(snap.models, cfg.seed);
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
        ++point_idx;
    }
    return rows;
}

} // namespace trainer
} // namespace atlasgen

#include "atlasgen/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace atlasgen {
namespace segnet {

using namespace ad;

nlohmann::json UnetConfig::to_json() const {
    return {{"levels", levels},
            {"base_channels", base_channels},
            {"num_classes", num_classes},
            {"stem_stride", stem_stride}};
}

UnetConfig UnetConfig::from_json(const nlohmann::json& j) {
    UnetConfig c;
    c.levels = j.at("levels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.stem_stride = j.at("stem_stride").get<int>();
    return c;
}

Unet::Unet(const UnetConfig& cfg, Rng& rng) : cfg_(cfg) {
    check(cfg.levels >= 2, "UnetConfig: need at least two levels");
    check(cfg.stem_stride == 1 || cfg.stem_stride == 2, "UnetConfig: stem_stride must be 1 or 2");
    auto ch = [&](int level) { return cfg.base_channels << level; };
    down_.emplace_back(rng, 1, ch(0), 3, cfg.stem_stride, 1);
    refine_.emplace_back(rng, ch(0), ch(0), 3, 1, 1);
    for (int l = 1; l < cfg.levels; ++l) {
        down_.emplace_back(rng, ch(l - 1), ch(l), 3, 2, 1);
        refine_.emplace_back(rng, ch(l), ch(l), 3, 1, 1);
    }
    for (int l = cfg.levels - 1; l >= 1; --l)
        up_.emplace_back(rng, ch(l) + ch(l - 1), ch(l - 1), 3, 1, 1);
    head_ = Conv3dLayer(rng, ch(0), cfg.num_classes, 1, 1, 0);
}

Var Unet::forward(const Var& images) const {
    const auto& s = images.shape();
    check(s.size() == 5 && s[1] == 1, "Unet expects [N,1,D,H,W]");
    const int f = cfg_.downsample_factor();
    if (s[2] % f != 0 || s[3] % f != 0 || s[4] % f != 0)
        throw ShapeError("Unet: spatial dims " + shape_str(s) + " must be divisible by " +
                         std::to_string(f));
    std::vector<Var> skips;
    Var h = images;
    for (int l = 0; l < cfg_.levels; ++l) {
        h = relu(instance_norm(down_[static_cast<size_t>(l)].forward(h)));
        h = relu(instance_norm(refine_[static_cast<size_t>(l)].forward(h)));
        skips.push_back(h);
    }
    for (size_t i = 0; i < up_.size(); ++i) {
        h = upsample_nearest2(h);
        h = concat_channels(h, skips[up_.size() - 1 - i]);
        h = relu(instance_norm(up_[i].forward(h)));
    }
    Var logits = head_.forward(h);
    if (cfg_.stem_stride == 2) logits = upsample_trilinear2(logits);
    return logits;
}

void Unet::collect(ad::ParamMap& pm, const std::string& prefix) const {
    for (size_t i = 0; i < down_.size(); ++i) down_[i].collect(pm, prefix + ".down" + std::to_string(i));
    for (size_t i = 0; i < refine_.size(); ++i)
        refine_[i].collect(pm, prefix + ".refine" + std::to_string(i));
    for (size_t i = 0; i < up_.size(); ++i) up_[i].collect(pm, prefix + ".up" + std::to_string(i));
    head_.collect(pm, prefix + ".head");
}

std::vector<Var> Unet::parameters() const {
    ParamMap pm;
    collect(pm);
    std::vector<Var> out;
    for (auto& [n, v] : pm.items) out.push_back(v);
    return out;
}

// ---------------------------------------------------------------- inference

namespace {

struct WindowPlan {
    std::vector<std::array<int, 3>> offsets;
    std::array<int, 3> patch;
};

WindowPlan plan_windows(const std::vector<int>& vol_shape, std::array<int, 3> patch) {
    WindowPlan plan;
    for (int a = 0; a < 3; ++a) {
        if (patch[static_cast<size_t>(a)] <= 0) patch[static_cast<size_t>(a)] = vol_shape[static_cast<size_t>(a)];
        patch[static_cast<size_t>(a)] = std::min(patch[static_cast<size_t>(a)], vol_shape[static_cast<size_t>(a)]);
    }
    plan.patch = patch;
    std::array<std::vector<int>, 3> starts;
    for (int a = 0; a < 3; ++a) {
        const int dim = vol_shape[static_cast<size_t>(a)];
        const int p = patch[static_cast<size_t>(a)];
        const int stride = std::max(1, p / 2);
        for (int s = 0;; s += stride) {
            const int start = std::min(s, dim - p);
            starts[static_cast<size_t>(a)].push_back(start);
            if (start == dim - p) break;
        }
    }
    for (int z : starts[0])
        for (int y : starts[1])
            for (int x : starts[2]) plan.offsets.push_back({z, y, x});
    return plan;
}

} // namespace

SegmentResult unet_segment(const Unet& model, const Volume& image, std::array<int, 3> patch) {
    NoGradGuard ng;
    const auto& shape = image.data.shape;
    const int C = model.config().num_classes;
    WindowPlan plan = plan_windows(shape, patch);
    Tensor logit_sum({C, shape[0], shape[1], shape[2]});
    Tensor weight({shape[0], shape[1], shape[2]});

    for (const auto& off : plan.offsets) {
        Tensor crop({1, 1, plan.patch[0], plan.patch[1], plan.patch[2]});
        for (int z = 0; z < plan.patch[0]; ++z)
            for (int y = 0; y < plan.patch[1]; ++y)
                for (int x = 0; x < plan.patch[2]; ++x)
                    crop.data[(static_cast<size_t>(z) * plan.patch[1] + y) * plan.patch[2] + x] =
                        image.data.data[(static_cast<size_t>(z + off[0]) * shape[1] + (y + off[1])) *
                                            shape[2] +
                                        (x + off[2])];
        Var logits = model.forward(constant(std::move(crop)));
        const Tensor& lv = logits.value();
        const int64_t pm = static_cast<int64_t>(plan.patch[0]) * plan.patch[1] * plan.patch[2];
        for (int c = 0; c < C; ++c)
            for (int z = 0; z < plan.patch[0]; ++z)
                for (int y = 0; y < plan.patch[1]; ++y)
                    for (int x = 0; x < plan.patch[2]; ++x)
                        logit_sum.data[((static_cast<size_t>(c) * shape[0] + z + off[0]) * shape[1] +
                                        y + off[1]) *
                                           shape[2] +
                                       x + off[2]] +=
                            lv.data[static_cast<size_t>(c) * pm +
                                    (static_cast<size_t>(z) * plan.patch[1] + y) * plan.patch[2] + x];
        for (int z = 0; z < plan.patch[0]; ++z)
            for (int y = 0; y < plan.patch[1]; ++y)
                for (int x = 0; x < plan.patch[2]; ++x)
                    weight.data[(static_cast<size_t>(z + off[0]) * shape[1] + y + off[1]) * shape[2] +
                                x + off[2]] += 1.0;
    }

    const int64_t m = weight.numel();
    Tensor probs({C, shape[0], shape[1], shape[2]});
    Tensor labels(shape);
    for (int64_t i = 0; i < m; ++i) {
        real mx = -1e300;
        for (int c = 0; c < C; ++c)
            mx = std::max(mx, logit_sum.data[static_cast<size_t>(c) * m + i] / weight.data[static_cast<size_t>(i)]);
        real sum = 0.0;
        for (int c = 0; c < C; ++c)
            sum += std::exp(logit_sum.data[static_cast<size_t>(c) * m + i] / weight.data[static_cast<size_t>(i)] - mx);
        int best = 0;
        real best_p = -1.0;
        for (int c = 0; c < C; ++c) {
            const real p =
                std::exp(logit_sum.data[static_cast<size_t>(c) * m + i] / weight.data[static_cast<size_t>(i)] - mx) / sum;
            probs.data[static_cast<size_t>(c) * m + i] = p;
            if (p > best_p) {
                best_p = p;
                best = c;
            }
        }
        labels.data[static_cast<size_t>(i)] = static_cast<real>(best);
    }
    SegmentResult res{SegmentationMap(std::move(labels), C), std::move(probs)};
    return res;
}

// ------------------------------------------------------------------ training

namespace {

Var soft_dice_loss(const Var& logits, const Tensor& labels, int num_classes) {
    Var probs = softmax_channels(logits);
    const auto& s = logits.shape();
    const int64_t m = static_cast<int64_t>(s[2]) * s[3] * s[4];
    const int N = s[0];
    // one-hot constants per class
    Var dice_sum;
    for (int c = 0; c < num_classes; ++c) {
        Tensor onehot({N, 1, s[2], s[3], s[4]});
        for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < m; ++i)
                onehot.data[static_cast<size_t>(n) * m + i] =
                    (static_cast<int>(labels.data[static_cast<size_t>(n) * m + i]) == c) ? 1.0 : 0.0;
        Var g = constant(std::move(onehot));
        Var p = slice_channel(probs, c);
        Var inter = sum(mul(p, g));
        Var denom = add(sum(p), sum(g));
        Var dice = div_(add_scalar(mul_scalar(inter, 2.0), 1.0), add_scalar(denom, 1.0));
        dice_sum = c == 0 ? dice : add(dice_sum, dice);
    }
    return add_scalar(neg(mul_scalar(dice_sum, 1.0 / num_classes)), 1.0);
}

} // namespace

UnetTrainResult unet_train(Unet& model, const UnetTrainConfig& cfg,
                           const std::vector<Volume>& images,
                           const std::vector<SegmentationMap>& labels,
                           const std::vector<Volume>& val_images,
                           const std::vector<SegmentationMap>& val_labels) {
    check(!images.empty(), "unet_train: empty training set");
    check(images.size() == labels.size(), "unet_train: image/label count mismatch");
    for (size_t i = 0; i < images.size(); ++i)
        require_same_shape(images[i].data, labels[i].labels, "unet_train");
    const int C = model.config().num_classes;
    const int factor = model.config().downsample_factor();

    Adam opt(model.parameters(), {cfg.lr, 0.9, 0.999, 1e-8});
    Rng rng = Rng::derive(cfg.seed, "unet-train");
    UnetTrainResult res;

    const auto& vshape = images[0].data.shape;
    std::array<int, 3> patch = cfg.patch;
    for (int a = 0; a < 3; ++a) {
        if (patch[static_cast<size_t>(a)] <= 0 || patch[static_cast<size_t>(a)] > vshape[static_cast<size_t>(a)])
            patch[static_cast<size_t>(a)] = vshape[static_cast<size_t>(a)];
        patch[static_cast<size_t>(a)] -= patch[static_cast<size_t>(a)] % factor; // keep divisible
        check(patch[static_cast<size_t>(a)] >= factor, "unet_train: patch too small for the network");
    }

    // best-validation bookkeeping
    std::vector<Tensor> best_params;
    auto snapshot_params = [&]() {
        std::vector<Tensor> out;
        for (auto& p : model.parameters()) out.push_back(p.value());
        return out;
    };
    auto restore_params = [&](const std::vector<Tensor>& saved) {
        auto params = model.parameters();
        for (size_t i = 0; i < params.size(); ++i) params[i].node()->value = saved[i];
    };
    auto val_dice = [&]() {
        real acc = 0.0;
        for (size_t i = 0; i < val_images.size(); ++i) {
            SegmentResult r = unet_segment(model, val_images[i], cfg.patch);
            acc += voxelcore::dice_score(r.labels, val_labels[i]);
        }
        return val_images.empty() ? 0.0 : acc / static_cast<real>(val_images.size());
    };

    for (int step = 0; step < cfg.steps; ++step) {
        Tensor batch({cfg.batch, 1, patch[0], patch[1], patch[2]});
        Tensor lab({cfg.batch, patch[0], patch[1], patch[2]});
        const int64_t pm = static_cast<int64_t>(patch[0]) * patch[1] * patch[2];
        for (int b = 0; b < cfg.batch; ++b) {
            const int idx = static_cast<int>(rng.uniform_int(static_cast<int64_t>(images.size())));
            const auto& img = images[static_cast<size_t>(idx)];
            const auto& seg = labels[static_cast<size_t>(idx)];
            const auto& shp = img.data.shape;
            std::array<int, 3> off{};
            for (int a = 0; a < 3; ++a) {
                const int room = shp[static_cast<size_t>(a)] - patch[static_cast<size_t>(a)];
                int o = room > 0 ? static_cast<int>(rng.uniform_int(room + 1)) : 0;
                o -= o % factor; // stay aligned so logits upsample cleanly
                off[static_cast<size_t>(a)] = o;
            }
            for (int z = 0; z < patch[0]; ++z)
                for (int y = 0; y < patch[1]; ++y)
                    for (int x = 0; x < patch[2]; ++x) {
                        const int64_t src = (static_cast<int64_t>(z + off[0]) * shp[1] + y + off[1]) *
                                                shp[2] +
                                            x + off[2];
                        const int64_t dst = (static_cast<int64_t>(z) * patch[1] + y) * patch[2] + x;
                        batch.data[static_cast<size_t>(b * pm + dst)] = img.data.data[static_cast<size_t>(src)];
                        lab.data[static_cast<size_t>(b * pm + dst)] = seg.labels.data[static_cast<size_t>(src)];
                    }
        }
        Var logits = model.forward(constant(batch));
        Var ce = cross_entropy(logits, lab);
        Var dice = soft_dice_loss(logits, lab, C);
        Var loss = add(ce, mul_scalar(dice, cfg.dice_weight));
        const real lv = loss.item();
        if (!std::isfinite(lv))
            throw NumericalError("unet_train step " + std::to_string(step) + ": non-finite loss");
        res.loss_curve.push_back(lv);
        opt.zero_grad();
        backward(loss);
        opt.step();

        if (!val_images.empty() && ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps)) {
            const real d = val_dice();
            if (d > res.best_val_dice) {
                res.best_val_dice = d;
                best_params = snapshot_params();
            }
        }
    }
    if (!best_params.empty()) restore_params(best_params);
    return res;
}

void save_unet(const std::string& path, const Unet& model, bool trained,
               const nlohmann::json& extra) {
    Checkpoint ck;
    ck.meta["kind"] = "unet";
    ck.meta["config"] = model.config().to_json();
    ck.meta["trained"] = trained;
    if (!extra.is_null()) ck.meta["extra"] = extra;
    ParamMap pm;
    model.collect(pm);
    save_params(pm, ck);
    write_checkpoint(path, ck);
}

Unet load_unet(const std::string& path, bool require_finished) {
    Checkpoint ck = read_checkpoint(path);
    if (require_finished) require_trained(ck, "segmentation model (" + path + ")");
    Rng dummy(0);
    Unet model(UnetConfig::from_json(ck.meta.at("config")), dummy);
    ParamMap pm;
    model.collect(pm);
    load_params(pm, ck);
    return model;
}

// ---------------------------------------------------------------- evaluation

DiceReport report_from_predictions(const std::vector<SegmentationMap>& predictions,
                                   const std::vector<SegmentationMap>& ground_truth,
                                   const std::vector<std::string>& class_names) {
    check(!predictions.empty() && predictions.size() == ground_truth.size(),
          "evaluate: need matching non-empty prediction/label sets");
    const int C = predictions[0].num_classes;
    for (const auto& gt : ground_truth)
        check(gt.num_classes == C, "evaluate: label class count " + std::to_string(gt.num_classes) +
                                       " does not match the predictions (" + std::to_string(C) + ")");
    DiceReport rep;
    rep.class_names = class_names;
    if (rep.class_names.empty()) {
        rep.class_names.push_back("background");
        for (int c = 1; c < C; ++c) rep.class_names.push_back("class_" + std::to_string(c));
    }
    check(static_cast<int>(rep.class_names.size()) == C, "evaluate: class name count mismatch");
    rep.per_class_mean.assign(static_cast<size_t>(C), 0.0);

    for (size_t i = 0; i < predictions.size(); ++i) {
        const auto per_class = voxelcore::dice_per_class(predictions[i], ground_truth[i]);
        for (int c = 0; c < C; ++c) rep.per_class_mean[static_cast<size_t>(c)] += per_class[static_cast<size_t>(c)];
        real fg = 0.0;
        for (int c = 1; c < C; ++c) fg += per_class[static_cast<size_t>(c)];
        rep.per_volume_mean.push_back(fg / static_cast<real>(C - 1));
    }
    for (auto& v : rep.per_class_mean) v /= static_cast<real>(predictions.size());
    real mean = 0.0;
    for (real v : rep.per_volume_mean) mean += v;
    mean /= static_cast<real>(rep.per_volume_mean.size());
    real var = 0.0;
    for (real v : rep.per_volume_mean) var += (v - mean) * (v - mean);
    var /= static_cast<real>(rep.per_volume_mean.size());
    rep.mean = mean;
    rep.stddev = std::sqrt(var);
    return rep;
}

DiceReport evaluate(const Unet& model, const std::vector<Volume>& images,
                    const std::vector<SegmentationMap>& ground_truth,
                    const std::vector<std::string>& class_names) {
    check(images.size() == ground_truth.size(), "evaluate: image/label count mismatch");
    const int C = model.config().num_classes;
    for (const auto& gt : ground_truth)
        check(gt.num_classes == C, "evaluate: label class count " + std::to_string(gt.num_classes) +
                                       " does not match the model (" + std::to_string(C) + ")");
    std::vector<SegmentationMap> preds;
    preds.reserve(images.size());
    for (const auto& img : images) preds.push_back(unet_segment(model, img).labels);
    return report_from_predictions(preds, ground_truth, class_names);
}

void write_dice_csv(const std::string& path, const DiceReport& report) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write dice csv: " + path);
    os << "structure_name,dice\n";
    char buf[64];
    for (size_t c = 0; c < report.class_names.size(); ++c) {
        std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * report.per_class_mean[c]);
        os << report.class_names[c] << "," << buf << "\n";
    }
    std::snprintf(buf, sizeof(buf), "%.1f±%.1f", 100.0 * report.mean, 100.0 * report.stddev);
    os << "mean," << buf << "\n";
}

std::string format_dice_table(const DiceReport& report) {
    std::string out;
    char buf[96];
    out += "structure            dice\n";
    for (size_t c = 0; c < report.class_names.size(); ++c) {
        std::snprintf(buf, sizeof(buf), "%-20s %5.1f\n", report.class_names[c].c_str(),
                      100.0 * report.per_class_mean[c]);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%-20s %5.1f±%.1f\n", "mean", 100.0 * report.mean,
                  100.0 * report.stddev);
    out += buf;
    return out;
}

} // namespace segnet
} // namespace atlasgen

#include "atlasgen/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace atlasgen {
namespace config {

PipelineConfig PipelineConfig::desk_defaults() {
    PipelineConfig c;
    c.train.queue_capacity = 256;
    c.train.batch_pretrain = 8;
    c.train.batch_joint = 1;
    c.train.steps_pretrain_t = 300;
    c.train.steps_pretrain_style = 500;
    c.train.steps_joint = 300;
    c.train.steps_aae = 500;
    c.train.aae_batch = 2;
    c.train.checkpoint_every = 500;
    c.train.metrics_every = 10;

    c.style_enc.channels = {6, 12, 24};
    c.style_enc.style_dim = 16;
    c.style_disc.hidden = {64, 64};
    c.style_disc.in_dim = 16;

    c.appearance.enc_channels = {6, 12};
    c.appearance.style_dim = 16;

    c.t_model.enc_channels = {8, 16, 16};
    c.t_model.dec_channels = {16, 16, 8};
    c.t_model.half_res_flow = true;
    c.flow_model = c.t_model;

    c.aae.enc_channels = {8, 16, 24};
    c.aae.dec_channels = {}; // mirrored
    c.aae.latent_dim = 16;
    c.aae.disc_hidden = {32, 32};

    c.unet.levels = 3;
    c.unet.base_channels = 8;
    c.unet.stem_stride = 2;
    c.unet.num_classes = 0;

    c.unet_train.steps = 400;
    c.unet_train.patch = {32, 40, 40};
    c.unet_train.val_every = 100;

    c.generate.count = 200;
    return c;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

std::string int_list_str(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw UsageError("bad boolean value '" + v + "' in config");
}

std::string fmt_real(real v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return std::string(buf);
}

// One registry drives parsing, overrides and echoing.
struct Field {
    std::string key; // "section.name"
    std::function<void(PipelineConfig&, const std::string&)> set;
    std::function<std::string(const PipelineConfig&)> get;
};

#define AG_REAL_FIELD(key, expr)                                                        \
    Field{key, [](PipelineConfig& c, const std::string& v) { c.expr = std::stod(v); }, \
          [](const PipelineConfig& c) { return fmt_real(c.expr); }}
#define AG_INT_FIELD(key, expr)                                                         \
    Field{key, [](PipelineConfig& c, const std::string& v) { c.expr = std::stoi(v); }, \
          [](const PipelineConfig& c) { return std::to_string(c.expr); }}
#define AG_U64_FIELD(key, expr)                                                          \
    Field{key, [](PipelineConfig& c, const std::string& v) { c.expr = std::stoull(v); }, \
          [](const PipelineConfig& c) { return std::to_string(c.expr); }}
#define AG_BOOL_FIELD(key, expr)                                                        \
    Field{key, [](PipelineConfig& c, const std::string& v) { c.expr = parse_bool(v); }, \
          [](const PipelineConfig& c) { return c.expr ? "true" : "false"; }}
#define AG_LIST_FIELD(key, expr)                                                            \
    Field{key, [](PipelineConfig& c, const std::string& v) { c.expr = parse_int_list(v); }, \
          [](const PipelineConfig& c) { return int_list_str(c.expr); }}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        AG_U64_FIELD("data.split_seed", split_seed),

        AG_REAL_FIELD("train.lambda1", train.lambda1),
        AG_REAL_FIELD("train.lambda2", train.lambda2),
        AG_REAL_FIELD("train.lambda3", train.lambda3),
        AG_REAL_FIELD("train.lambda_reg", train.lambda_reg),
        AG_REAL_FIELD("train.lambda_cl", train.lambda_cl),
        AG_REAL_FIELD("train.tau", train.tau),
        AG_REAL_FIELD("train.momentum", train.momentum),
        AG_INT_FIELD("train.queue_capacity", train.queue_capacity),
        AG_REAL_FIELD("train.lr", train.lr),
        AG_REAL_FIELD("train.model_beta1", train.model_beta1),
        AG_REAL_FIELD("train.model_beta2", train.model_beta2),
        AG_REAL_FIELD("train.disc_beta1", train.disc_beta1),
        AG_REAL_FIELD("train.disc_beta2", train.disc_beta2),
        AG_INT_FIELD("train.batch_pretrain", train.batch_pretrain),
        AG_INT_FIELD("train.batch_joint", train.batch_joint),
        AG_INT_FIELD("train.steps_pretrain_t", train.steps_pretrain_t),
        AG_INT_FIELD("train.steps_pretrain_style", train.steps_pretrain_style),
        AG_INT_FIELD("train.steps_joint", train.steps_joint),
        AG_INT_FIELD("train.steps_aae", train.steps_aae),
        AG_INT_FIELD("train.aae_batch", train.aae_batch),
        AG_REAL_FIELD("train.aae_mu", train.aae_mu),
        AG_U64_FIELD("train.seed", train.seed),
        AG_INT_FIELD("train.checkpoint_every", train.checkpoint_every),
        AG_INT_FIELD("train.metrics_every", train.metrics_every),
        AG_BOOL_FIELD("train.normalize_codes", train.normalize_codes),
        AG_BOOL_FIELD("train.freeze_style_in_app", train.freeze_style_in_app),
        AG_BOOL_FIELD("train.init_flow_from_t", train.init_flow_from_t),
        AG_REAL_FIELD("train.grad_clip", train.grad_clip),
        AG_INT_FIELD("train.ncc_window", train.ncc_window),
        AG_REAL_FIELD("train.t_smooth", train.t_smooth),
        AG_BOOL_FIELD("train.random_source_pairs", train.random_source_pairs),

        AG_LIST_FIELD("style_encoder.channels", style_enc.channels),
        AG_INT_FIELD("style_encoder.style_dim", style_enc.style_dim),
        AG_REAL_FIELD("style_encoder.leaky", style_enc.leaky),
        AG_LIST_FIELD("style_disc.hidden", style_disc.hidden),
        AG_REAL_FIELD("style_disc.leaky", style_disc.leaky),

        AG_LIST_FIELD("appearance.enc_channels", appearance.enc_channels),
        AG_INT_FIELD("appearance.n_res", appearance.n_res),
        AG_INT_FIELD("appearance.style_dim", appearance.style_dim),
        AG_REAL_FIELD("appearance.leaky", appearance.leaky),

        AG_LIST_FIELD("t_model.enc_channels", t_model.enc_channels),
        AG_LIST_FIELD("t_model.dec_channels", t_model.dec_channels),
        AG_BOOL_FIELD("t_model.half_res_flow", t_model.half_res_flow),
        AG_REAL_FIELD("t_model.leaky", t_model.leaky),
        AG_LIST_FIELD("flow_model.enc_channels", flow_model.enc_channels),
        AG_LIST_FIELD("flow_model.dec_channels", flow_model.dec_channels),
        AG_BOOL_FIELD("flow_model.half_res_flow", flow_model.half_res_flow),
        AG_REAL_FIELD("flow_model.leaky", flow_model.leaky),

        AG_LIST_FIELD("aae.enc_channels", aae.enc_channels),
        AG_LIST_FIELD("aae.dec_channels", aae.dec_channels),
        AG_INT_FIELD("aae.latent_dim", aae.latent_dim),
        AG_LIST_FIELD("aae.disc_hidden", aae.disc_hidden),
        AG_REAL_FIELD("aae.leaky", aae.leaky),

        AG_INT_FIELD("unet.levels", unet.levels),
        AG_INT_FIELD("unet.base_channels", unet.base_channels),
        AG_INT_FIELD("unet.stem_stride", unet.stem_stride),
        AG_INT_FIELD("unet.num_classes", unet.num_classes),

        AG_INT_FIELD("unet_train.steps", unet_train.steps),
        AG_REAL_FIELD("unet_train.lr", unet_train.lr),
        AG_INT_FIELD("unet_train.batch", unet_train.batch),
        Field{"unet_train.patch",
              [](PipelineConfig& c, const std::string& v) {
                  auto l = parse_int_list(v);
                  check(l.size() == 3, "unet_train.patch needs three values");
                  c.unet_train.patch = {l[0], l[1], l[2]};
              },
              [](const PipelineConfig& c) {
                  return int_list_str({c.unet_train.patch[0], c.unet_train.patch[1],
                                       c.unet_train.patch[2]});
              }},
        AG_U64_FIELD("unet_train.seed", unet_train.seed),
        AG_INT_FIELD("unet_train.val_every", unet_train.val_every),
        AG_REAL_FIELD("unet_train.dice_weight", unet_train.dice_weight),
        AG_INT_FIELD("unet_train.metrics_every", unet_train.metrics_every),

        AG_INT_FIELD("ssim.window", ssim.window),
        AG_REAL_FIELD("ssim.sigma", ssim.sigma),
        AG_INT_FIELD("ssim.max_scales", ssim.max_scales),

        AG_INT_FIELD("generate.count", generate.count),
        AG_U64_FIELD("generate.seed", generate.seed),
        AG_REAL_FIELD("generate.style_truncation", generate.sample.style_truncation),

        AG_INT_FIELD("phantom.patients", phantom_patients),
        AG_INT_FIELD("phantom.families", phantom_families),
        AG_REAL_FIELD("phantom.spread", phantom_spread),
        Field{"phantom.shape",
              [](PipelineConfig& c, const std::string& v) {
                  auto l = parse_int_list(v);
                  check(l.size() == 3, "phantom.shape needs three values");
                  c.phantom.shape = {l[0], l[1], l[2]};
              },
              [](const PipelineConfig& c) {
                  return int_list_str(
                      {c.phantom.shape[0], c.phantom.shape[1], c.phantom.shape[2]});
              }},
        AG_INT_FIELD("phantom.classes", phantom.num_classes),
        AG_REAL_FIELD("phantom.texture_amp", phantom.texture_amp),
        AG_REAL_FIELD("phantom.voxel_noise", phantom.voxel_noise),
    };
    return f;
}

#undef AG_REAL_FIELD
#undef AG_INT_FIELD
#undef AG_U64_FIELD
#undef AG_BOOL_FIELD
#undef AG_LIST_FIELD

void set_field(PipelineConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            try {
                f.set(cfg, value);
            } catch (const UsageError&) {
                throw;
            } catch (const std::exception&) {
                throw UsageError("bad value '" + value + "' for config key '" + key + "'");
            }
            return;
        }
    }
    throw UsageError("unknown config key '" + key + "'");
}

} // namespace

PipelineConfig parse_config_text(const std::string& text, PipelineConfig base) {
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw UsageError("config line " + std::to_string(lineno) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw UsageError("config line " + std::to_string(lineno) + ": key outside any section");
        set_field(base, section + "." + key, value);
    }
    return base;
}

PipelineConfig load_config(const std::string& path, PipelineConfig base) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open config file: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str(), std::move(base));
}

void apply_override(PipelineConfig& cfg, const std::string& spec) {
    const size_t eq = spec.find('=');
    if (eq == std::string::npos)
        throw UsageError("config override must look like section.key=value, got '" + spec + "'");
    set_field(cfg, trim(spec.substr(0, eq)), trim(spec.substr(eq + 1)));
}

std::string config_text(const PipelineConfig& cfg) {
    std::string out;
    std::string section;
    for (const auto& f : fields()) {
        const std::string sec = f.key.substr(0, f.key.find('.'));
        if (sec != section) {
            if (!section.empty()) out += "\n";
            out += "[" + sec + "]\n";
            section = sec;
        }
        out += f.key.substr(f.key.find('.') + 1) + " = " + f.get(cfg) + "\n";
    }
    return out;
}

void write_config(const std::string& path, const PipelineConfig& cfg) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write config echo: " + path);
    os << config_text(cfg);
}

} // namespace config
} // namespace atlasgen

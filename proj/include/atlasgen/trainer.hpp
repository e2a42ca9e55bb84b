#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <string>

#include "atlasgen/appearance.hpp"
#include "atlasgen/checkpoint.hpp"
#include "atlasgen/flow.hpp"
#include "atlasgen/flowaae.hpp"
#include "atlasgen/optim.hpp"
#include "atlasgen/style.hpp"

namespace atlasgen {
namespace trainer {

using voxelcore::SegmentationMap;
using voxelcore::Volume;

// Optimization hyperparameters for the two-phase schedule. Defaults follow the
// published settings: Adam 2e-4 with model betas (0.9, 0.999) and discriminator
// betas (0.5, 0.999); loss weights lambda1=5, lambda2=1, lambda3=0.1,
// lambda_reg=0.1; tau=0.7; momentum 0.99; batches 32 (pretrain) / 4 (joint).
struct TrainConfig {
    real lambda1 = 5.0;
    real lambda2 = 1.0;
    real lambda3 = 0.1;
    real lambda_reg = 0.1;
    real lambda_cl = 1.0; // weight of the contrastive term (1 = published loss)
    real tau = 0.7;
    real momentum = 0.99;
    int queue_capacity = 4096;
    real lr = 2e-4;
    real model_beta1 = 0.9, model_beta2 = 0.999;
    real disc_beta1 = 0.5, disc_beta2 = 0.999;
    int batch_pretrain = 32;
    int batch_joint = 4;
    int steps_pretrain_t = 2000;
    int steps_pretrain_style = 20000;
    int steps_joint = 50000;
    int steps_aae = 5000;
    int aae_batch = 4;
    real aae_mu = 0.1;
    uint64_t seed = 0;
    int checkpoint_every = 1000;
    int metrics_every = 10;
    bool normalize_codes = true;      // L2-normalize codes inside the contrastive loss
    bool freeze_style_in_app = false; // stop style gradients through L_app
    bool init_flow_from_t = false;
    real grad_clip = 5.0; // 0 disables clipping
    int ncc_window = 9;   // spatial-transformer pre-training
    real t_smooth = 1.0;
    bool random_source_pairs = false; // joint sources: false = always the atlas
};

// Training-split data shared by all phases.
struct TrainData {
    std::vector<Volume> train;
    std::vector<Volume> val;
    Volume atlas;
    SegmentationMap atlas_seg;
    int atlas_train_index = 0;
};

// Long-format metrics sink: phase,step,name,value. Values are printed with a
// fixed format so reruns are byte-identical.
class MetricsWriter {
public:
    MetricsWriter() = default;
    explicit MetricsWriter(const std::string& path, bool append = false);
    void write(const std::string& phase, int step, const std::string& name, real value);
    bool open() const { return os_.is_open(); }

private:
    std::ofstream os_;
};

// ---- model bundles -----------------------------------------------------------

struct JointModels {
    style::StyleEncoder query;
    style::StyleEncoder key;
    style::LatentDiscriminator d_style;
    appearance::AppearanceModel appearance;
    flow::FlowModel flow_model;
};

struct Optimizers {
    ad::Adam model;
    ad::Adam disc;
};

// Model group (style encoder + appearance + flow) with betas (0.9, 0.999);
// discriminator group with betas (0.5, 0.999); shared learning rate.
Optimizers build_optimizers(const TrainConfig& cfg, const JointModels& models);

// ---- style pre-training --------------------------------------------------------

struct StyleStepMetrics {
    real vol_cl = 0.0;
    real adv_gen = 0.0;
    real d_loss = 0.0;
    real total = 0.0;
};

// One optimizer step of L_vol_cl + lambda3 * L_adv on the query encoder plus a
// discriminator step; momentum update and queue insertion included.
StyleStepMetrics pretrain_style_step(const TrainConfig& cfg, style::StyleEncoder& query,
                                     style::StyleEncoder& key, style::LatentDiscriminator& d_style,
                                     style::KeyQueue& queue, Optimizers& opts,
                                     const Tensor& query_batch, const Tensor& kpos_batch,
                                     Rng& noise_rng);

// ---- joint phase ----------------------------------------------------------------

struct JointStepMetrics {
    real total = 0.0;
    real vol_cl = 0.0;
    real app = 0.0;
    real flow_total = 0.0;
    real flow_recon = 0.0;
    real flow_reg = 0.0;
    real adv_gen = 0.0;
    real d_loss = 0.0;
};

// L_total = lambda_cl*L_vol_cl + l1*L_app + l2*L_flow + l3*L_adv; one model-group
// step then one discriminator step; momentum update and key enqueue included.
JointStepMetrics joint_train_step(const TrainConfig& cfg, JointModels& models, Optimizers& opts,
                                  style::KeyQueue& queue, const Tensor& source_batch,
                                  const Tensor& target_batch, const Tensor& kpos_batch,
                                  Rng& noise_rng, const voxelcore::SsimOptions& ssim);

// ---- phase loops (checkpointable) ------------------------------------------------

struct PhaseOutcome {
    int steps = 0;
    std::map<std::string, real> final_metrics;
};

// Spatial-transformer pre-training (NCC + smoothness on random train pairs).
PhaseOutcome run_pretrain_t(const TrainConfig& cfg, const flow::FlowModelConfig& t_cfg,
                            const TrainData& data, const std::string& ckpt_path,
                            MetricsWriter* metrics, bool resume);
flow::FlowModel load_t_model(const std::string& ckpt_path, bool require_finished = true);

// Style-encoder pre-training; requires the trained transformer checkpoint.
PhaseOutcome run_pretrain_style(const TrainConfig& cfg, const style::StyleEncoderConfig& enc_cfg,
                                const style::LatentDiscriminatorConfig& d_cfg,
                                const TrainData& data, const std::string& t_ckpt,
                                const std::string& ckpt_path, MetricsWriter* metrics, bool resume);

// Joint optimization of style encoder, appearance and flow models.
struct JointPhaseArgs {
    appearance::AppearanceConfig appearance_cfg;
    flow::FlowModelConfig flow_cfg;
    voxelcore::SsimOptions ssim;
    std::string style_ckpt; // prerequisite (pretrained style phase)
    std::string t_ckpt;     // positive-key transformer
    bool skip_style_pretrain = false; // allow fresh style encoder (ablations)
};
PhaseOutcome run_joint(const TrainConfig& cfg, const JointPhaseArgs& args, const TrainData& data,
                       const std::string& ckpt_path, MetricsWriter* metrics, bool resume);

struct JointSnapshot {
    JointModels models;
    style::KeyQueue queue;
    bool trained = false;
};
JointSnapshot load_joint(const std::string& ckpt_path, bool require_finished = true);

// Flow AAE over the base image's flows, generated with the frozen joint model.
PhaseOutcome run_train_aae(const TrainConfig& cfg, flowaae::FlowAaeConfig aae_cfg,
                           const TrainData& data, const std::string& joint_ckpt,
                           const std::string& ckpt_path, MetricsWriter* metrics, bool resume);
flowaae::FlowAae load_aae(const std::string& ckpt_path, bool require_finished = true);

// ---- hyperparameter sweep ---------------------------------------------------------

struct SweepPoint {
    real lambda1, lambda2, lambda3;
};
struct SweepRow {
    SweepPoint point;
    real reg_dice = 0.0;
    real sup_dice = 0.0;
    bool ok = false;
    std::string error;
};

// Runs the joint phase per grid point at the configured (reduced) budget and
// scores registration Dice and generated-data segmentation Dice per point.
// Failures are recorded and the sweep continues.
struct SweepHooks {
    // provided by the pipeline layer to avoid a dependency cycle
    std::function<real(const JointModels&)> reg_dice;
    std::function<real(const JointModels&, uint64_t seed)> sup_dice;
};
std::vector<SweepRow> sweep(const TrainConfig& base_cfg, const JointPhaseArgs& args,
                            const TrainData& data, const std::vector<SweepPoint>& grid,
                            const std::string& work_dir, const SweepHooks& hooks);

} // namespace trainer
} // namespace atlasgen

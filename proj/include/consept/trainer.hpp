#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "consept/data.hpp"
#include "consept/losses.hpp"
#include "consept/metrics.hpp"
#include "consept/model.hpp"
#include "consept/optimizer.hpp"
#include "consept/schedule.hpp"

namespace consept::engine {

struct TrainConfig {
    double base_epochs = 30.0;          // passes over the filtered base-task data
    double novel_epoch_fraction = 0.5;  // epoch budget multiplier for steps t > 1
    double base_lr = 1e-3;
    double head_lr_multiplier = 10.0;
    double weight_decay = 0.01;
    double poly_power = 0.9;
    int batch_size = 8;
    uint64_t seed = 1;
    double pseudo_threshold = 0.7;
    bool augment = true;  // train-time dihedral (flip/rot90) + circular-shift transforms
    bool loss_at_input_res = false;  // supervise upsampled logits instead of the F0 grid
    // directory with pretrained trunks (trunk_adapters.ckpt / trunk_plain.ckpt);
    // empty means training starts from random initialization
    std::string pretrained_dir;

    // ablation surface
    bool use_adapters = true;
    bool freeze_backbone_after_base = false;  // SSUL-style frozen extractor for t > 1
    bool freeze_old_heads = true;
    bool use_mse = true;
    bool use_contrast = true;
    bool use_c_dice = true;
    bool use_on_dice = true;
    std::vector<int> distill_layers = {3};  // indices into F0..F3
    loss::ContrastForm contrast_form = loss::ContrastForm::softmax;
    double contrast_temperature = 1.0;
    double dice_smoothing = 1.0;
    bool dice_include_background = true;

    void validate() const;
};

// per-step mutable training state; the old model is an immutable snapshot
struct StepContext {
    int step = 1;
    model::ModelState* live = nullptr;
    std::optional<model::ModelState> old_model;
    AdamW optimizer{AdamW::Options{}};
    const TaskSchedule* schedule = nullptr;
};

// deep copy with gradient flow structurally severed (constants when bound)
model::ModelState snapshot_old_model(const model::ModelState& state);

// argmax over sigmoid scores with a confidence floor; sub-threshold pixels
// fall back to background
LabelMask pseudo_label(const nn::Tensor& old_scores, const std::vector<int>& channel_classes,
                       double threshold);

// per-pixel merge rule: current-step ground truth wins, pseudo labels fill the rest
LabelMask merge_pseudo_gt(const LabelMask& pseudo, const LabelMask& gt_new,
                          const std::vector<int>& current_classes);

// freeze flags on g_{1..t-1} only; no-op for t = 1
void freeze_old_heads(model::ModelState& state, int t);
void freeze_backbone(model::ModelState& state);

// copies every non-head parameter from the checkpoint into `state`;
// throws when shapes or the architecture disagree
void load_pretrained_trunk(model::ModelState& state, const std::string& checkpoint_path);

struct TrainSample {
    const data::LabeledSample* sample = nullptr;
    LabelMask filtered;  // annotations restricted to C_t
    int transform = 0;   // packed augmentation code applied at batch time
};

// Packed augmentation: dihedral group element (flip/rot90) plus a circular
// translation. Image and mask transform together so labels stay pixel-exact.
int pack_transform(int dihedral, int shift_y, int shift_x, int image_size);
nn::Tensor augment_image(const nn::Tensor& image, int code);
LabelMask augment_mask(const LabelMask& mask, int code);

// one optimizer update over a batch; throws on NaN loss
loss::LossReport train_step(const std::vector<TrainSample>& batch, StepContext& ctx,
                            const TrainConfig& config);

metrics::MetricsReport evaluate(const model::ModelState& state,
                                const std::vector<data::LabeledSample>& samples,
                                const TaskSchedule& schedule, int t);

struct ProtocolResult {
    std::vector<metrics::MetricsReport> reports;
    std::vector<std::string> checkpoint_paths;
};

// full X-Y protocol: filter, snapshot, freeze, train, evaluate per step;
// per-step artifacts land under <out_dir>/step_<t>/
ProtocolResult run_protocol(const TaskSchedule& schedule, const data::Corpus& corpus,
                            const model::ModelConfig& model_config, const TrainConfig& config,
                            const std::string& out_dir);

}  // namespace consept::engine

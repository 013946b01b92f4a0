#pragma once

#include <optional>
#include <vector>

#include "consept/autograd.hpp"
#include "consept/tensor.hpp"

namespace consept::loss {

// Binary target planes derived from an integer label mask. `valid` is 1 where
// the pixel carries a scoreable label, 0 where it is ignored.
struct OneHotMask {
    nn::Tensor planes;  // [C, H, W], entries in {0,1}
    nn::Tensor valid;   // [H, W]

    int64_t channels() const { return planes.dim(0); }
    int64_t pixels() const { return planes.dim(1) * planes.dim(2); }
};

// Builds one-hot planes from labels; label values must map to channels via
// channel_of_label (-1 entries mean "no channel": treated as ignore).
OneHotMask one_hot(const std::vector<int>& labels, int h, int w,
                   const std::vector<int>& channel_of_label, int64_t num_channels,
                   int ignore_label = 255);

struct OldNewSplit {
    std::vector<int64_t> old_channels;  // background + all channels of steps < t
    std::vector<int64_t> new_channels;  // channels of step t
};

struct LossReport {
    double bce = 0.0;
    double c_dice = 0.0;
    double on_dice = 0.0;
    double mse = 0.0;
    double contrast = 0.0;
    double total = 0.0;
    bool has_distill = false;
};

struct DiceOptions {
    double smoothing = 1.0;
    bool include_background = true;  // background channel joins the class mean
};

enum class ContrastForm { softmax, literal };

// mean binary cross-entropy with per-channel sigmoid over valid pixels;
// throws if no pixel is valid
nn::Var bce_loss(const nn::Var& scores, const OneHotMask& target);

// 1 - mean over classes of the smoothed dice coefficient (sigmoid applied here)
nn::Var c_dice_loss(const nn::Var& scores, const OneHotMask& target, const DiceOptions& opt);

// per-pixel old/new aggregation of sigmoid scores and one-hot targets:
// M~ = [sum_old sigma, sum_new sigma], S~ = [max_old, max_new]
struct BinaryGroup {
    nn::Var scores;     // [2, H, W]
    nn::Tensor target;  // [2, H, W]
};
BinaryGroup binarize_old_new(const nn::Var& scores, const OneHotMask& target,
                             const OldNewSplit& split);

// single-fraction dice over both group channels jointly
nn::Var on_dice_loss(const BinaryGroup& group, const nn::Tensor& valid, double smoothing);

// element mean of squared feature differences; old features carry no gradient
nn::Var mse_distill(const nn::Var& f_new, const nn::Tensor& f_old);

// per-pixel cosine contrastive distillation; softmax form by default, the
// literal ratio-of-cosines form clamps cosines to [1e-6, 1]
nn::Var contrast_distill(const nn::Var& f_new, const nn::Tensor& f_old, double temperature,
                         ContrastForm form = ContrastForm::softmax);

// step-1 objective is bce + c_dice; later steps add on_dice + mse + contrast,
// all with unit weights
struct LossParts {
    nn::Var bce;
    nn::Var c_dice;
    std::optional<nn::Var> on_dice;
    std::optional<nn::Var> mse;
    std::optional<nn::Var> contrast;
};
nn::Var total_loss(int step, const LossParts& parts, LossReport& report);

}  // namespace consept::loss

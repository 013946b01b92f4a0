#include "consept/losses.hpp"

#include <algorithm>
#include <stdexcept>

namespace consept::loss {

using nn::Tensor;
using nn::Var;

OneHotMask one_hot(const std::vector<int>& labels, int h, int w,
                   const std::vector<int>& channel_of_label, int64_t num_channels,
                   int ignore_label) {
    if (static_cast<int64_t>(labels.size()) != static_cast<int64_t>(h) * w)
        throw std::invalid_argument("one_hot: label count != h*w");
    OneHotMask m;
    m.planes = Tensor({num_channels, h, w});
    m.valid = Tensor({h, w});
    for (int64_t i = 0; i < static_cast<int64_t>(labels.size()); ++i) {
        int lbl = labels[static_cast<size_t>(i)];
        if (lbl == ignore_label) continue;
        int ch = lbl >= 0 && lbl < static_cast<int>(channel_of_label.size())
                     ? channel_of_label[static_cast<size_t>(lbl)]
                     : -1;
        if (ch < 0) continue;
        m.valid.data[static_cast<size_t>(i)] = 1.0;
        m.planes.data[static_cast<size_t>(ch) * labels.size() + static_cast<size_t>(i)] = 1.0;
    }
    return m;
}

namespace {

// valid plane broadcast across channels, matching a [C,H,W] score layout
Tensor broadcast_valid(const Tensor& valid, int64_t channels) {
    int64_t n = valid.numel();
    Tensor out({channels, valid.dim(0), valid.dim(1)});
    for (int64_t c = 0; c < channels; ++c)
        std::copy(valid.data.begin(), valid.data.end(), out.data.begin() + c * n);
    return out;
}

Var dice_fraction(const Var& m, const Var& s, double eps) {
    Var numer = nn::add_scalar(nn::scale(nn::dot(m, s), 2.0), eps);
    Var denom = nn::add_scalar(nn::add(nn::dot(m, m), nn::dot(s, s)), eps);
    return nn::div(numer, denom);
}

}  // namespace

Var bce_loss(const Var& scores, const OneHotMask& target) {
    if (!scores->value.same_shape(target.planes))
        throw std::invalid_argument("bce_loss: score/target shape mismatch");
    double any_valid = 0.0;
    for (double v : target.valid.data) any_valid += v;
    if (any_valid == 0.0) throw std::invalid_argument("bce_loss: no valid pixels in target");
    Tensor mask = broadcast_valid(target.valid, scores->value.dim(0));
    return nn::bce_with_logits(scores, target.planes, mask);
}

Var c_dice_loss(const Var& scores, const OneHotMask& target, const DiceOptions& opt) {
    if (!scores->value.same_shape(target.planes))
        throw std::invalid_argument("c_dice_loss: score/target shape mismatch");
    int64_t channels = scores->value.dim(0);
    int64_t n = scores->value.dim(1) * scores->value.dim(2);
    Var m = nn::reshape(nn::sigmoid(scores), {channels, n});
    Var mask = nn::constant(Tensor({1, n}, target.valid.data));
    Var s_all = nn::constant(Tensor({channels, n}, target.planes.data));

    int64_t first = opt.include_background ? 0 : 1;
    Var acc;
    int64_t count = 0;
    for (int64_t c = first; c < channels; ++c) {
        Var mc = nn::mul(nn::slice_rows(m, c, 1), mask);
        Var sc = nn::slice_rows(s_all, c, 1);
        Var coeff = dice_fraction(mc, sc, opt.smoothing);
        acc = acc ? nn::add(acc, coeff) : coeff;
        ++count;
    }
    if (count == 0) throw std::invalid_argument("c_dice_loss: no channels selected");
    return nn::add_scalar(nn::scale(acc, -1.0 / static_cast<double>(count)), 1.0);
}

BinaryGroup binarize_old_new(const Var& scores, const OneHotMask& target,
                             const OldNewSplit& split) {
    int64_t channels = scores->value.dim(0);
    int64_t h = scores->value.dim(1), w = scores->value.dim(2);
    if (split.new_channels.empty())
        throw std::invalid_argument("binarize_old_new: empty new-channel set");
    if (split.old_channels.size() + split.new_channels.size() != static_cast<size_t>(channels))
        throw std::invalid_argument("binarize_old_new: split does not cover all channels");

    Var sig = nn::reshape(nn::sigmoid(scores), {channels, h * w});
    auto group_sum = [&](const std::vector<int64_t>& chans) {
        Var acc;
        for (int64_t c : chans) {
            if (c < 0 || c >= channels)
                throw std::invalid_argument("binarize_old_new: channel out of range");
            Var row = nn::slice_rows(sig, c, 1);
            acc = acc ? nn::add(acc, row) : row;
        }
        return acc;
    };
    Var m_old = group_sum(split.old_channels);
    Var m_new = group_sum(split.new_channels);

    BinaryGroup out;
    out.scores = nn::reshape(nn::concat_rows({m_old, m_new}), {2, h, w});
    out.target = Tensor({2, h, w});
    int64_t n = h * w;
    for (int64_t i = 0; i < n; ++i) {
        double mo = 0.0, mn = 0.0;
        for (int64_t c : split.old_channels)
            mo = std::max(mo, target.planes.data[static_cast<size_t>(c * n + i)]);
        for (int64_t c : split.new_channels)
            mn = std::max(mn, target.planes.data[static_cast<size_t>(c * n + i)]);
        out.target.data[static_cast<size_t>(i)] = mo;
        out.target.data[static_cast<size_t>(n + i)] = mn;
    }
    return out;
}

Var on_dice_loss(const BinaryGroup& group, const Tensor& valid, double smoothing) {
    int64_t n = group.scores->value.dim(1) * group.scores->value.dim(2);
    if (valid.numel() != n) throw std::invalid_argument("on_dice_loss: valid plane mismatch");
    Tensor vmask({2, n});
    std::copy(valid.data.begin(), valid.data.end(), vmask.data.begin());
    std::copy(valid.data.begin(), valid.data.end(), vmask.data.begin() + n);
    Var m = nn::mul(nn::reshape(group.scores, {2, n}), nn::constant(std::move(vmask)));
    Var s = nn::constant(Tensor({2, n}, group.target.data));
    return nn::add_scalar(nn::scale(dice_fraction(m, s, smoothing), -1.0), 1.0);
}

Var mse_distill(const Var& f_new, const Tensor& f_old) {
    if (!f_new->value.same_shape(f_old))
        throw std::invalid_argument("mse_distill: feature shape mismatch " +
                                    f_new->value.shape_str() + " vs " + f_old.shape_str());
    return nn::mean(nn::square(nn::sub(f_new, nn::constant(f_old))));
}

Var contrast_distill(const Var& f_new, const Tensor& f_old, double temperature,
                     ContrastForm form) {
    if (!f_new->value.same_shape(f_old))
        throw std::invalid_argument("contrast_distill: feature shape mismatch");
    Var tok_new = nn::normalize_rows(nn::chw_to_tokens(f_new));
    Var tok_old = nn::normalize_rows(nn::chw_to_tokens(nn::constant(f_old)));
    Var cos = nn::matmul_nt(tok_new, tok_old);  // [J, J], row j: cos(F_t_j, F_old_k)
    if (form == ContrastForm::softmax) {
        Var logits = nn::scale(cos, 1.0 / temperature);
        return nn::mean(nn::sub(nn::logsumexp_rows(logits), nn::take_diag(logits)));
    }
    Var clamped = nn::clamp(cos, 1e-6, 1.0);
    int64_t j = clamped->value.rows();
    Var row_sum = nn::matmul(clamped, nn::constant(Tensor::full({j, 1}, 1.0)));
    return nn::mean(nn::sub(nn::log_(row_sum), nn::log_(nn::take_diag(clamped))));
}

Var total_loss(int step, const LossParts& parts, LossReport& report) {
    if (step < 1) throw std::invalid_argument("total_loss: step must be >= 1");
    report = LossReport{};
    report.bce = parts.bce->value.data[0];
    report.c_dice = parts.c_dice->value.data[0];
    Var total = nn::add(parts.bce, parts.c_dice);
    if (step == 1) {
        if (parts.on_dice || parts.mse || parts.contrast)
            throw std::invalid_argument("total_loss: distillation terms are not part of step 1");
    } else {
        if (!parts.on_dice || !parts.mse || !parts.contrast)
            throw std::invalid_argument(
                "total_loss: step > 1 requires on_dice, mse and contrast terms");
        report.on_dice = (*parts.on_dice)->value.data[0];
        report.mse = (*parts.mse)->value.data[0];
        report.contrast = (*parts.contrast)->value.data[0];
        report.has_distill = true;
        total = nn::add(nn::add(total, *parts.on_dice), nn::add(*parts.mse, *parts.contrast));
    }
    report.total = total->value.data[0];
    return total;
}

}  // namespace consept::loss

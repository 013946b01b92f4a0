#include "consept/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "consept/checkpoint.hpp"

namespace consept::engine {

namespace fs = std::filesystem;
using model::BoundModel;
using model::ModelState;
using nn::Tensor;
using nn::Var;

void TrainConfig::validate() const {
    if (novel_epoch_fraction <= 0.0 || novel_epoch_fraction > 1.0)
        throw std::invalid_argument("TrainConfig: novel_epoch_fraction must be in (0,1]");
    if (base_lr <= 0.0 || head_lr_multiplier <= 0.0)
        throw std::invalid_argument("TrainConfig: learning rates must be positive");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (base_epochs <= 0.0) throw std::invalid_argument("TrainConfig: base_epochs must be > 0");
    if (pseudo_threshold < 0.0 || pseudo_threshold > 1.0)
        throw std::invalid_argument("TrainConfig: pseudo_threshold must be in [0,1]");
    for (int l : distill_layers)
        if (l < 0 || l > 3)
            throw std::invalid_argument("TrainConfig: distill layer index out of range");
    if (distill_layers.empty() && (use_mse || use_contrast))
        throw std::invalid_argument("TrainConfig: distillation enabled with empty layer set");
}

ModelState snapshot_old_model(const ModelState& state) { return state.snapshot(); }

LabelMask pseudo_label(const Tensor& old_scores, const std::vector<int>& channel_classes,
                       double threshold) {
    int64_t c = old_scores.dim(0), h = old_scores.dim(1), w = old_scores.dim(2);
    if (static_cast<size_t>(c) != channel_classes.size())
        throw std::invalid_argument("pseudo_label: channel mapping size mismatch");
    LabelMask out(static_cast<int>(h), static_cast<int>(w));
    int64_t n = h * w;
    for (int64_t i = 0; i < n; ++i) {
        int best = 0;
        double best_sig = -1.0;
        for (int64_t ch = 0; ch < c; ++ch) {
            double sig = 1.0 / (1.0 + std::exp(-old_scores.data[static_cast<size_t>(ch * n + i)]));
            if (sig > best_sig) {
                best_sig = sig;
                best = static_cast<int>(ch);
            }
        }
        out.labels[static_cast<size_t>(i)] =
            best_sig < threshold ? 0 : static_cast<uint8_t>(channel_classes[static_cast<size_t>(best)]);
    }
    return out;
}

LabelMask merge_pseudo_gt(const LabelMask& pseudo, const LabelMask& gt_new,
                          const std::vector<int>& current_classes) {
    if (pseudo.h != gt_new.h || pseudo.w != gt_new.w)
        throw std::invalid_argument("merge_pseudo_gt: spatial shape mismatch");
    auto is_current = [&](int lbl) {
        return std::find(current_classes.begin(), current_classes.end(), lbl) !=
               current_classes.end();
    };
    LabelMask out = pseudo;
    for (size_t i = 0; i < out.labels.size(); ++i)
        if (is_current(gt_new.labels[i])) out.labels[i] = gt_new.labels[i];
    return out;
}

void freeze_old_heads(ModelState& state, int t) {
    if (t <= 1) return;
    for (auto& p : state.params)
        if (p.is_head && p.head_step < t) p.frozen = true;
}

void freeze_backbone(ModelState& state) {
    for (auto& p : state.params)
        if (!p.is_head && p.name.rfind("projection", 0) != 0) p.frozen = true;
}

void load_pretrained_trunk(ModelState& state, const std::string& checkpoint_path) {
    ModelState trunk = model::load_checkpoint(checkpoint_path);
    if (trunk.config.use_adapters != state.config.use_adapters)
        throw std::runtime_error("load_pretrained_trunk: adapter architecture mismatch in " +
                                 checkpoint_path);
    for (auto& p : state.params) {
        if (p.is_head) continue;
        if (!trunk.has_param(p.name))
            throw std::runtime_error("load_pretrained_trunk: missing parameter " + p.name +
                                     " in " + checkpoint_path);
        const auto& src = trunk.param(p.name).value;
        if (!src.same_shape(p.value))
            throw std::runtime_error("load_pretrained_trunk: shape mismatch for " + p.name);
        p.value = src;
    }
}

namespace {

// source pixel of destination (y, x): circular shift then dihedral element
inline std::pair<int, int> augment_src(int y, int x, int s, int code) {
    int dihedral = code & 7;
    int sy = (code >> 3) & 0xff;
    int sx = (code >> 11) & 0xff;
    for (int r = 0; r < (dihedral & 3); ++r) {
        int ny = x, nx = s - 1 - y;  // inverse of a 90-degree rotation
        y = ny;
        x = nx;
    }
    if (dihedral & 4) x = s - 1 - x;
    return {(y + sy) % s, (x + sx) % s};
}

}  // namespace

int pack_transform(int dihedral, int shift_y, int shift_x, int image_size) {
    shift_y = ((shift_y % image_size) + image_size) % image_size;
    shift_x = ((shift_x % image_size) + image_size) % image_size;
    return (dihedral & 7) | (shift_y << 3) | (shift_x << 11);
}

Tensor augment_image(const Tensor& image, int code) {
    if (code == 0) return image;
    int s = static_cast<int>(image.dim(1));
    Tensor out({image.dim(0), image.dim(1), image.dim(2)});
    for (int c = 0; c < image.dim(0); ++c)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                auto [sy, sx] = augment_src(y, x, s, code);
                out.at(c, y, x) = image.at(c, sy, sx);
            }
    return out;
}

LabelMask augment_mask(const LabelMask& mask, int code) {
    if (code == 0) return mask;
    LabelMask out(mask.h, mask.w);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            auto [sy, sx] = augment_src(y, x, mask.h, code);
            out.at(y, x) = mask.at(sy, sx);
        }
    return out;
}

loss::LossReport train_step(const std::vector<TrainSample>& batch, StepContext& ctx,
                            const TrainConfig& config) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const int t = ctx.step;
    const TaskSchedule& schedule = *ctx.schedule;
    ModelState& state = *ctx.live;
    const auto& cfg = state.config;
    const int grid = cfg.feature_grid();
    const int num_channels = state.total_channels();
    const auto channel_map = schedule.channel_of_class(t, 254);
    const auto& current_classes = schedule.partitions[static_cast<size_t>(t - 1)];

    if (t > 1 && !ctx.old_model.has_value())
        throw std::runtime_error("train_step: step > 1 requires an old-model snapshot");

    BoundModel live(state, /*train=*/true);
    std::optional<BoundModel> old_bound;
    if (t > 1) old_bound.emplace(*ctx.old_model, /*train=*/false);

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    Var bce_acc, cdice_acc, ondice_acc, mse_acc, contrast_acc;
    auto fold = [](Var& acc, Var v) { acc = acc ? nn::add(acc, v) : v; };

    std::vector<int> cache_layers = config.distill_layers;
    if (!cfg.use_adapters) cache_layers = {0};

    for (const TrainSample& sample_ref : batch) {
        const TrainSample* ts = &sample_ref;
        Tensor image = augment_image(ts->sample->image, ts->transform);
        auto features = live.backbone_forward(image);
        Var scores = live.predict_scores(features, t);

        LabelMask full_mask = augment_mask(ts->filtered, ts->transform);
        LabelMask target_mask = config.loss_at_input_res
                                    ? full_mask
                                    : full_mask.resized_nearest(grid, grid);
        if (config.loss_at_input_res)
            scores = nn::bilinear_resize(scores, cfg.image_size, cfg.image_size);
        std::vector<Tensor> old_feats;
        if (t > 1) {
            auto old_features = old_bound->backbone_forward(image);
            Var old_scores = old_bound->predict_scores(old_features, t - 1);
            Tensor old_score_map = config.loss_at_input_res
                                       ? model::upsample_scores(old_scores->value,
                                                                cfg.image_size, cfg.image_size)
                                       : old_scores->value;
            LabelMask pseudo = pseudo_label(old_score_map, schedule.channel_classes(t - 1),
                                            config.pseudo_threshold);
            old_feats.resize(old_features.maps.size());
            for (int l : cache_layers)
                old_feats[static_cast<size_t>(l)] =
                    old_features.maps[static_cast<size_t>(l)]->value;
            target_mask = merge_pseudo_gt(pseudo, target_mask, current_classes);
        }

        std::vector<int> labels(target_mask.labels.begin(), target_mask.labels.end());
        loss::OneHotMask target = loss::one_hot(labels, target_mask.h, target_mask.w,
                                                channel_map, num_channels, kIgnoreLabel);

        fold(bce_acc, loss::bce_loss(scores, target));
        loss::DiceOptions dopt{config.dice_smoothing, config.dice_include_background};
        if (config.use_c_dice) fold(cdice_acc, loss::c_dice_loss(scores, target, dopt));

        if (t > 1) {
            if (config.use_on_dice) {
                loss::OldNewSplit split;
                int n_old = 1;
                for (int s = 1; s < t; ++s)
                    n_old += static_cast<int>(schedule.partitions[static_cast<size_t>(s - 1)].size());
                for (int c = 0; c < n_old; ++c) split.old_channels.push_back(c);
                for (int c = n_old; c < num_channels; ++c) split.new_channels.push_back(c);
                auto group = loss::binarize_old_new(scores, target, split);
                fold(ondice_acc, loss::on_dice_loss(group, target.valid, config.dice_smoothing));
            }
            const auto& layers = cache_layers;
            if (config.use_mse) {
                Var acc;
                for (int l : layers)
                    fold(acc, loss::mse_distill(features.maps[static_cast<size_t>(l)],
                                                old_feats[static_cast<size_t>(l)]));
                fold(mse_acc, nn::scale(acc, 1.0 / static_cast<double>(layers.size())));
            }
            if (config.use_contrast) {
                Var acc;
                for (int l : layers)
                    fold(acc, loss::contrast_distill(features.maps[static_cast<size_t>(l)],
                                                     old_feats[static_cast<size_t>(l)],
                                                     config.contrast_temperature,
                                                     config.contrast_form));
                fold(contrast_acc, nn::scale(acc, 1.0 / static_cast<double>(layers.size())));
            }
        }
    }

    auto finish = [&](Var acc) {
        return acc ? nn::scale(acc, inv_b) : nn::constant(Tensor::scalar(0.0));
    };
    loss::LossParts parts;
    parts.bce = finish(bce_acc);
    parts.c_dice = finish(cdice_acc);
    if (t > 1) {
        parts.on_dice = finish(ondice_acc);
        parts.mse = finish(mse_acc);
        parts.contrast = finish(contrast_acc);
    }

    loss::LossReport report;
    Var total = loss::total_loss(t, parts, report);
    if (!std::isfinite(report.total))
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(t) +
                                 ", iteration " + std::to_string(ctx.optimizer.iteration()));
    nn::backward(total);
    ctx.optimizer.step(state, live);
    return report;
}

metrics::MetricsReport evaluate(const ModelState& state,
                                const std::vector<data::LabeledSample>& samples,
                                const TaskSchedule& schedule, int t) {
    const auto channel_classes = schedule.channel_classes(t);
    int max_class = 0;
    for (int c : channel_classes) max_class = std::max(max_class, c);
    metrics::ConfusionAccumulator acc(max_class + 1);

    BoundModel bound(state, /*train=*/false);
    for (const auto& s : samples) {
        auto features = bound.backbone_forward(s.image);
        Tensor up = bound.predict_masks(features, t);
        auto chan_labels = model::argmax_labels(up);
        for (auto& l : chan_labels) l = channel_classes[static_cast<size_t>(l)];
        // classes not yet introduced score as background at intermediate steps
        LabelMask gt = s.mask;
        for (auto& lbl : gt.labels)
            if (lbl != kIgnoreLabel && lbl != 0 && !schedule.seen_by(lbl, t)) lbl = 0;
        acc.accumulate(chan_labels, gt);
    }
    return metrics::iou_report(acc, schedule, t);
}

ProtocolResult run_protocol(const TaskSchedule& schedule, const data::Corpus& corpus,
                            const model::ModelConfig& model_config, const TrainConfig& config,
                            const std::string& out_dir) {
    config.validate();
    model::ModelConfig mc = model_config;
    mc.use_adapters = config.use_adapters;
    mc.validate();
    if (mc.image_size != corpus.spec.image_size)
        throw std::invalid_argument("run_protocol: model/corpus image size mismatch");

    fs::create_directories(out_dir);
    ProtocolResult result;
    ModelState state = ModelState::init(mc, config.seed);
    const bool pretrained = !config.pretrained_dir.empty();
    if (pretrained) {
        fs::path trunk = fs::path(config.pretrained_dir) /
                         (mc.use_adapters ? "trunk_adapters.ckpt" : "trunk_plain.ckpt");
        load_pretrained_trunk(state, trunk.string());
    }
    Rng head_rng(config.seed ^ 0x9d2c5680ULL);

    const int total_steps = schedule.num_steps();
    for (int t = 1; t <= total_steps; ++t) {
        // annotation filtering (overlapped/disjoint semantics)
        std::vector<TrainSample> step_data;
        for (const auto& s : corpus.train) {
            auto filtered = filter_annotations(s.mask, schedule, t);
            if (!filtered.keep) continue;
            step_data.push_back(TrainSample{&s, std::move(filtered.mask)});
        }
        if (step_data.empty())
            throw std::runtime_error("run_protocol: no training samples for step " +
                                     std::to_string(t));

        StepContext ctx;
        ctx.step = t;
        ctx.live = &state;
        ctx.schedule = &schedule;
        if (t > 1) {
            ctx.old_model = snapshot_old_model(state);
            if (config.freeze_old_heads) freeze_old_heads(state, t);
        }
        // with a pretrained trunk the frozen-extractor variants freeze from the
        // base task on (the SSUL regime); from scratch the trunk must first
        // learn the base task, so freezing starts at step 2
        if (config.freeze_backbone_after_base && (t > 1 || pretrained))
            freeze_backbone(state);
        state.add_head(static_cast<int>(schedule.partitions[static_cast<size_t>(t - 1)].size()),
                       head_rng);

        double epochs = t == 1 ? config.base_epochs : config.base_epochs * config.novel_epoch_fraction;
        int64_t iterations = static_cast<int64_t>(
            std::ceil(epochs * static_cast<double>(step_data.size()) / config.batch_size));
        AdamW::Options opt;
        opt.base_lr = config.base_lr;
        opt.head_lr_multiplier = config.head_lr_multiplier;
        opt.weight_decay = config.weight_decay;
        opt.poly_power = config.poly_power;
        opt.total_iterations = iterations;
        ctx.optimizer = AdamW(opt);

        fs::path step_dir = fs::path(out_dir) / ("step_" + std::to_string(t));
        fs::create_directories(step_dir);
        std::ofstream losses_csv(step_dir / "losses.csv", std::ios::trunc);
        losses_csv << "iter,lr,bce,c_dice,on_dice,mse,contrast,total\n";

        Rng order_rng(config.seed * 0x2545f4914f6cdd1dULL + static_cast<uint64_t>(t));
        std::vector<size_t> order;
        size_t cursor = 0;
        auto next_batch = [&]() {
            std::vector<TrainSample> batch;
            while (batch.size() < static_cast<size_t>(config.batch_size)) {
                if (cursor >= order.size()) {
                    order.resize(step_data.size());
                    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
                    order_rng.shuffle(order);
                    cursor = 0;
                }
                TrainSample drawn = step_data[order[cursor++]];
                if (config.augment) {
                    int s = mc.image_size;
                    drawn.transform = pack_transform(order_rng.range(0, 7),
                                                     order_rng.range(0, s - 1),
                                                     order_rng.range(0, s - 1), s);
                }
                batch.push_back(std::move(drawn));
            }
            return batch;
        };

        for (int64_t it = 0; it < iterations; ++it) {
            double lr = ctx.optimizer.current_lr();
            auto report = train_step(next_batch(), ctx, config);
            losses_csv << it << "," << lr << "," << report.bce << "," << report.c_dice << ","
                       << report.on_dice << "," << report.mse << "," << report.contrast << ","
                       << report.total << "\n";
        }
        losses_csv.close();

        auto report = evaluate(state, corpus.val, schedule, t);
        metrics::write_report(report, (step_dir / "metrics.json").string());
        std::string ckpt = (step_dir / "checkpoint").string();
        model::save_checkpoint(state, ckpt);
        result.reports.push_back(std::move(report));
        result.checkpoint_paths.push_back(ckpt);
    }

    metrics::write_summary_csv(result.reports, (fs::path(out_dir) / "summary.csv").string());
    return result;
}

}  // namespace consept::engine

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "consept/checkpoint.hpp"
#include "consept/schedule.hpp"
#include "consept/trainer.hpp"
#include "test_helpers.hpp"

using namespace consept;
using engine::Setting;
using engine::TaskSchedule;
using engine::TrainConfig;
using model::ModelState;
using nn::Tensor;

namespace fs = std::filesystem;

namespace {

// tiny corpus + config so whole protocols run in seconds
data::Corpus tiny_corpus(uint64_t seed = 5) {
    data::SceneSpec spec;
    spec.num_classes = 3;
    spec.image_size = 16;
    spec.min_shapes = 1;
    spec.max_shapes = 2;
    spec.seed = seed;
    return data::build_corpus(spec, 24, 8);
}

TrainConfig tiny_train(uint64_t seed = 1) {
    TrainConfig t;
    t.base_epochs = 2.0;
    t.batch_size = 4;
    t.seed = seed;
    return t;
}

model::ModelConfig tiny_model() { return testing::toy_config(); }

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST_CASE("task schedule construction") {
    auto s = engine::build_task_schedule(20, 15, 1, Setting::overlapped);
    CHECK(s.num_steps() == 6);
    CHECK(s.partitions[0].size() == 15);
    CHECK(s.partitions[1] == std::vector<int>{16});
    CHECK(s.partitions[5] == std::vector<int>{20});

    auto s2 = engine::build_task_schedule(6, 4, 2, Setting::disjoint);
    CHECK(s2.num_steps() == 2);
    CHECK(s2.partitions[1] == std::vector<int>{5, 6});

    auto joint = engine::build_task_schedule(6, 6, 1, Setting::overlapped);
    CHECK(joint.num_steps() == 1);

    CHECK_THROWS_AS((void)engine::build_task_schedule(20, 15, 2, Setting::overlapped),
                    std::invalid_argument);
}

TEST_CASE("channel mapping is a monotone bijection over seen classes") {
    auto s = engine::build_task_schedule(6, 4, 2, Setting::overlapped);
    auto chans = s.channel_classes(2);
    CHECK(chans == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
    for (size_t i = 1; i < chans.size(); ++i) CHECK(chans[i] > chans[i - 1]);
    auto inverse = s.channel_of_class(2, 10);
    for (size_t ch = 0; ch < chans.size(); ++ch)
        CHECK(inverse[static_cast<size_t>(chans[ch])] == static_cast<int>(ch));
    CHECK(inverse[8] == -1);

    auto chans1 = s.channel_classes(1);
    CHECK(chans1 == std::vector<int>{0, 1, 2, 3, 4});
}

TEST_CASE("annotation filtering follows overlapped/disjoint semantics") {
    auto s = engine::build_task_schedule(6, 4, 1, Setting::overlapped);
    // image with classes {2, 5} at step 2 where C_2 = {5}
    LabelMask m(2, 2);
    m.labels = {2, 5, 0, 0};

    auto kept = engine::filter_annotations(m, s, 2);
    CHECK(kept.keep);
    CHECK(kept.mask.labels == std::vector<uint8_t>{0, 5, 0, 0});  // class 2 remapped

    // same image in the disjoint setting: classes {2,5} are all seen by step 2
    auto s_dis = engine::build_task_schedule(6, 4, 1, Setting::disjoint);
    auto kept_dis = engine::filter_annotations(m, s_dis, 2);
    CHECK(kept_dis.keep);

    // a future class (6 arrives at step 3) excludes the image when disjoint
    LabelMask future(2, 2);
    future.labels = {6, 5, 0, 0};
    CHECK(!engine::filter_annotations(future, s_dis, 2).keep);
    CHECK(engine::filter_annotations(future, s, 2).keep);  // overlapped keeps it

    // no current-class pixel: dropped in both settings
    LabelMask stale(2, 2);
    stale.labels = {1, 2, 3, 0};
    CHECK(!engine::filter_annotations(stale, s, 2).keep);
    CHECK(!engine::filter_annotations(stale, s_dis, 2).keep);
}

TEST_CASE("pseudo labeling: argmax with confidence floor") {
    std::vector<int> chans{0, 1, 2};
    Tensor scores({3, 1, 1}, {logit(0.1), logit(0.9), logit(0.2)});
    auto m = engine::pseudo_label(scores, chans, 0.7);
    CHECK(m.labels[0] == 1);

    Tensor low({3, 1, 1}, {logit(0.1), logit(0.6), logit(0.2)});
    CHECK(engine::pseudo_label(low, chans, 0.7).labels[0] == 0);
}

TEST_CASE("pseudo labeling matches a brute-force oracle on a score grid") {
    std::vector<int> chans{0, 1, 2};
    for (int a = 1; a < 10; ++a)
        for (int b = 1; b < 10; ++b)
            for (int c = 1; c < 10; ++c) {
                double pa = a / 10.0, pb = b / 10.0, pc = c / 10.0;
                Tensor scores({3, 1, 1}, {logit(pa), logit(pb), logit(pc)});
                auto got = engine::pseudo_label(scores, chans, 0.7).labels[0];
                // scalar oracle: argmax over sigmoids, floor at 0.7
                double best = pa;
                int arg = 0;
                if (pb > best) { best = pb; arg = 1; }
                if (pc > best) { best = pc; arg = 2; }
                int expected = best < 0.7 ? 0 : arg;
                CHECK(static_cast<int>(got) == expected);
            }
}

TEST_CASE("pseudo-GT merge follows the per-pixel rule and the oracle") {
    std::vector<int> current{3, 4};
    LabelMask pseudo(1, 2);
    pseudo.labels = {1, 2};
    LabelMask gt(1, 2);
    gt.labels = {3, 0};
    auto merged = engine::merge_pseudo_gt(pseudo, gt, current);
    CHECK(merged.labels == std::vector<uint8_t>{3, 2});

    // exhaustive enumeration over a 2-old/2-new label space
    for (int p = 0; p <= 2; ++p)
        for (int g = 0; g <= 4; ++g) {
            if (g == 1 || g == 2) continue;  // gt_new labels are {0} or current classes
            LabelMask pm(1, 1), gm(1, 1);
            pm.labels = {static_cast<uint8_t>(p)};
            gm.labels = {static_cast<uint8_t>(g)};
            auto out = engine::merge_pseudo_gt(pm, gm, current);
            int expected = (g == 3 || g == 4) ? g : p;
            CHECK(static_cast<int>(out.labels[0]) == expected);
        }

    // current-class pixels never get overwritten
    for (uint8_t lbl : merged.labels) CHECK((lbl <= 2 || lbl == 3 || lbl == 4));
}

TEST_CASE("snapshot is immutable and byte-identical") {
    auto corpus = tiny_corpus();
    auto schedule = engine::build_task_schedule(3, 2, 1, Setting::overlapped);
    ModelState state = ModelState::init(tiny_model(), 3);
    Rng head_rng(4);
    state.add_head(2, head_rng);

    ModelState snap1 = engine::snapshot_old_model(state);
    ModelState snap2 = engine::snapshot_old_model(state);
    CHECK(snap1.content_hash() == snap2.content_hash());
    uint64_t before = snap1.content_hash();

    // snapshot forward equals the pre-training live forward on a fixed batch
    auto img = corpus.train[0].image;
    auto live_scores =
        model::BoundModel(state, false).predict_scores(
            model::BoundModel(state, false).backbone_forward(img), 1);
    auto snap_scores =
        model::BoundModel(snap1, false).predict_scores(
            model::BoundModel(snap1, false).backbone_forward(img), 1);
    CHECK(live_scores->value.data == snap_scores->value.data);

    // train the live model; the snapshot must not move
    engine::StepContext ctx;
    ctx.step = 1;
    ctx.live = &state;
    ctx.schedule = &schedule;
    ctx.optimizer = engine::AdamW(engine::AdamW::Options{});
    engine::TrainSample ts{&corpus.train[0], corpus.train[0].mask};
    auto report = engine::train_step({ts}, ctx, tiny_train());
    CHECK(std::isfinite(report.total));
    CHECK(snap1.content_hash() == before);
}

TEST_CASE("freeze_old_heads pins exactly the old heads") {
    ModelState state = ModelState::init(tiny_model(), 7);
    Rng head_rng(8);
    state.add_head(2, head_rng);
    state.add_head(1, head_rng);

    engine::freeze_old_heads(state, 1);  // no-op
    for (const auto& p : state.params) CHECK(!p.frozen);

    engine::freeze_old_heads(state, 2);
    CHECK(state.param("head.step1.weight").frozen);
    CHECK(state.param("head.step1.bias").frozen);
    CHECK(!state.param("head.step2.weight").frozen);
    int frozen_count = 0;
    for (const auto& p : state.params) frozen_count += p.frozen ? 1 : 0;
    CHECK(frozen_count == 2);
}

TEST_CASE("frozen parameters stay bitwise fixed through optimizer steps") {
    auto corpus = tiny_corpus();
    auto schedule = engine::build_task_schedule(3, 2, 1, Setting::overlapped);
    auto cfg = tiny_train();

    ModelState state = ModelState::init(tiny_model(), 11);
    Rng head_rng(12);
    state.add_head(2, head_rng);
    ModelState old = engine::snapshot_old_model(state);
    engine::freeze_old_heads(state, 2);
    state.add_head(1, head_rng);

    auto head1_before = state.param("head.step1.weight").value.data;
    auto head2_before = state.param("head.step2.weight").value.data;
    auto backbone_before = state.param("vit.block0.attn.q.weight").value.data;

    engine::StepContext ctx;
    ctx.step = 2;
    ctx.live = &state;
    ctx.old_model = old;
    ctx.schedule = &schedule;
    ctx.optimizer = engine::AdamW(engine::AdamW::Options{});

    for (int it = 0; it < 3; ++it) {
        std::vector<engine::TrainSample> batch;
        for (int k = 0; k < 4; ++k) {
            const auto& s = corpus.train[static_cast<size_t>(it * 4 + k)];
            auto filtered = engine::filter_annotations(s.mask, schedule, 2);
            batch.push_back(engine::TrainSample{&s, filtered.keep ? filtered.mask : s.mask});
        }
        engine::train_step(batch, ctx, cfg);
    }

    CHECK(state.param("head.step1.weight").value.data == head1_before);   // frozen: bitwise
    CHECK(state.param("head.step2.weight").value.data != head2_before);   // trainable moved
    CHECK(state.param("vit.block0.attn.q.weight").value.data != backbone_before);  // full FT
}

TEST_CASE("train_step at step 1 reports no distillation terms") {
    auto corpus = tiny_corpus();
    auto schedule = engine::build_task_schedule(3, 3, 1, Setting::overlapped);
    ModelState state = ModelState::init(tiny_model(), 13);
    Rng head_rng(14);
    state.add_head(3, head_rng);

    engine::StepContext ctx;
    ctx.step = 1;
    ctx.live = &state;
    ctx.schedule = &schedule;
    ctx.optimizer = engine::AdamW(engine::AdamW::Options{});
    engine::TrainSample ts{&corpus.train[0], corpus.train[0].mask};
    auto report = engine::train_step({ts}, ctx, tiny_train());
    CHECK(!report.has_distill);
    CHECK(report.on_dice == 0.0);
    CHECK(report.mse == 0.0);
    CHECK(report.contrast == 0.0);
    CHECK(report.total == doctest::Approx(report.bce + report.c_dice));
}

TEST_CASE("polynomial learning-rate schedule") {
    engine::AdamW::Options opt;
    opt.base_lr = 1e-3;
    opt.poly_power = 0.9;
    opt.total_iterations = 100;
    engine::AdamW adam(opt);
    CHECK(adam.current_lr() == doctest::Approx(1e-3));
    ModelState state = ModelState::init(tiny_model(), 17);
    model::BoundModel bound(state, true);  // no gradients: step only advances the clock
    for (int k = 0; k < 40; ++k) adam.step(state, bound);
    CHECK(adam.current_lr() == doctest::Approx(1e-3 * std::pow(1.0 - 40.0 / 100.0, 0.9)));
}

TEST_CASE("NaN loss aborts with a diagnostic") {
    auto corpus = tiny_corpus();
    auto schedule = engine::build_task_schedule(3, 3, 1, Setting::overlapped);
    ModelState state = ModelState::init(tiny_model(), 19);
    Rng head_rng(20);
    state.add_head(3, head_rng);
    state.param("projection.weight").value.data[0] = std::nan("");

    engine::StepContext ctx;
    ctx.step = 1;
    ctx.live = &state;
    ctx.schedule = &schedule;
    ctx.optimizer = engine::AdamW(engine::AdamW::Options{});
    engine::TrainSample ts{&corpus.train[0], corpus.train[0].mask};
    CHECK_THROWS_WITH_AS((void)engine::train_step({ts}, ctx, tiny_train()),
                         doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("run_protocol emits per-step artifacts and identical reruns") {
    auto corpus = tiny_corpus();
    auto schedule = engine::build_task_schedule(3, 2, 1, Setting::overlapped);
    auto cfg = tiny_train(33);

    fs::path dir1 = fs::temp_directory_path() / "consept_proto_a";
    fs::path dir2 = fs::temp_directory_path() / "consept_proto_b";
    fs::remove_all(dir1);
    fs::remove_all(dir2);

    auto r1 = engine::run_protocol(schedule, corpus, tiny_model(), cfg, dir1.string());
    auto r2 = engine::run_protocol(schedule, corpus, tiny_model(), cfg, dir2.string());

    REQUIRE(r1.reports.size() == 2);
    // step-t report covers exactly 1 + |C_{1:t}| classes
    CHECK(r1.reports[0].per_class_iou.size() == 3);
    CHECK(r1.reports[1].per_class_iou.size() == 4);

    for (int t = 1; t <= 2; ++t) {
        fs::path step = dir1 / ("step_" + std::to_string(t));
        CHECK(fs::exists(step / "checkpoint"));
        CHECK(fs::exists(step / "metrics.json"));
        CHECK(fs::exists(step / "losses.csv"));
    }

    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
    };
    for (int t = 1; t <= 2; ++t) {
        std::string step = "step_" + std::to_string(t);
        CHECK(slurp(dir1 / step / "metrics.json") == slurp(dir2 / step / "metrics.json"));
        CHECK(slurp(dir1 / step / "losses.csv") == slurp(dir2 / step / "losses.csv"));
        CHECK(slurp(dir1 / step / "checkpoint") == slurp(dir2 / step / "checkpoint"));
    }

    // joint degenerate case: T = 1
    auto joint_schedule = engine::build_task_schedule(3, 3, 1, Setting::overlapped);
    fs::path dir3 = fs::temp_directory_path() / "consept_proto_joint";
    fs::remove_all(dir3);
    auto rj = engine::run_protocol(joint_schedule, corpus, tiny_model(), cfg, dir3.string());
    CHECK(rj.reports.size() == 1);

    fs::remove_all(dir1);
    fs::remove_all(dir2);
    fs::remove_all(dir3);
}

TEST_CASE("filtered training targets never expose labels outside C_t") {
    auto corpus = tiny_corpus();
    auto schedule = engine::build_task_schedule(3, 2, 1, Setting::overlapped);
    for (const auto& s : corpus.train) {
        auto filtered = engine::filter_annotations(s.mask, schedule, 2);
        if (!filtered.keep) continue;
        for (uint8_t lbl : filtered.mask.labels) CHECK((lbl == 0 || lbl == 3));
    }
}

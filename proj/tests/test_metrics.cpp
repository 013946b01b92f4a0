#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "consept/metrics.hpp"
#include "consept/rng.hpp"

using namespace consept;
using engine::Setting;
using metrics::ConfusionAccumulator;
using metrics::MetricsReport;

namespace {

LabelMask mask_of(std::vector<uint8_t> labels, int h, int w) {
    LabelMask m(h, w);
    m.labels = std::move(labels);
    return m;
}

}  // namespace

TEST_CASE("perfect prediction fills only the diagonal") {
    auto schedule = engine::build_task_schedule(2, 1, 1, Setting::overlapped);
    ConfusionAccumulator acc(3);
    LabelMask gt = mask_of({0, 1, 2, 1}, 2, 2);
    std::vector<int> pred{0, 1, 2, 1};
    acc.accumulate(pred, gt);
    CHECK(acc.at(0, 0) == 1);
    CHECK(acc.at(1, 1) == 2);
    CHECK(acc.at(2, 2) == 1);
    CHECK(acc.total() == 4);

    auto report = metrics::iou_report(acc, schedule, 2);
    for (const auto& [cls, iou] : report.per_class_iou) CHECK(*iou == doctest::Approx(1.0));
    CHECK(*report.groups.all == doctest::Approx(1.0));
}

TEST_CASE("all-background prediction lands in column zero with the gt histogram") {
    ConfusionAccumulator acc(4);
    LabelMask gt = mask_of({0, 1, 2, 3, 1, 1}, 2, 3);
    std::vector<int> pred(6, 0);
    acc.accumulate(pred, gt);
    CHECK(acc.at(0, 0) == 1);
    CHECK(acc.at(1, 0) == 3);
    CHECK(acc.at(2, 0) == 1);
    CHECK(acc.at(3, 0) == 1);
}

TEST_CASE("ignore pixels are excluded and bad labels rejected") {
    ConfusionAccumulator acc(3);
    LabelMask gt = mask_of({0, kIgnoreLabel, 1, 2}, 2, 2);
    std::vector<int> pred{0, 2, 1, 2};
    acc.accumulate(pred, gt);
    CHECK(acc.total() == 3);

    std::vector<int> bad_pred{0, 0, 0, 9};
    CHECK_THROWS_AS(acc.accumulate(bad_pred, gt), std::invalid_argument);
}

TEST_CASE("accumulator is additive over batch partitions") {
    Rng rng(5);
    LabelMask gt_a = mask_of({}, 0, 0), gt_b = mask_of({}, 0, 0);
    gt_a = LabelMask(4, 4);
    gt_b = LabelMask(4, 4);
    std::vector<int> pred_a(16), pred_b(16);
    for (int i = 0; i < 16; ++i) {
        gt_a.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(rng.below(3));
        gt_b.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(rng.below(3));
        pred_a[static_cast<size_t>(i)] = static_cast<int>(rng.below(3));
        pred_b[static_cast<size_t>(i)] = static_cast<int>(rng.below(3));
    }
    ConfusionAccumulator whole(3), half1(3), half2(3);
    whole.accumulate(pred_a, gt_a);
    whole.accumulate(pred_b, gt_b);
    half1.accumulate(pred_a, gt_a);
    half2.accumulate(pred_b, gt_b);
    half1.merge(half2);
    for (int g = 0; g < 3; ++g)
        for (int p = 0; p < 3; ++p) CHECK(whole.at(g, p) == half1.at(g, p));
}

TEST_CASE("iou formula on a one-class toy: TP=6 FP=2 FN=2 gives 0.6") {
    auto schedule = engine::build_task_schedule(1, 1, 1, Setting::overlapped);
    ConfusionAccumulator acc(2);
    // 6 correct class-1 pixels, 2 background pixels predicted class 1 (FP),
    // 2 class-1 pixels predicted background (FN), plus background mass
    LabelMask gt = mask_of({1, 1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0}, 3, 4);
    std::vector<int> pred{1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
    acc.accumulate(pred, gt);
    auto report = metrics::iou_report(acc, schedule, 1);
    CHECK(*report.per_class_iou[1] == doctest::Approx(0.6));
}

TEST_CASE("group means recompute from per-class values and respect the split") {
    auto schedule = engine::build_task_schedule(6, 4, 2, Setting::overlapped);
    ConfusionAccumulator acc(7);
    Rng rng(9);
    LabelMask gt(8, 8);
    std::vector<int> pred(64);
    for (int i = 0; i < 64; ++i) {
        gt.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(rng.below(7));
        pred[static_cast<size_t>(i)] = static_cast<int>(rng.below(7));
    }
    acc.accumulate(pred, gt);
    auto report = metrics::iou_report(acc, schedule, 2);

    auto mean_over = [&](std::vector<int> classes) {
        double s = 0;
        int n = 0;
        for (int c : classes) {
            auto it = report.per_class_iou.find(c);
            if (it != report.per_class_iou.end() && it->second.has_value()) {
                s += *it->second;
                ++n;
            }
        }
        return s / n;
    };
    CHECK(*report.groups.base == doctest::Approx(mean_over({0, 1, 2, 3, 4})));
    CHECK(*report.groups.novel == doctest::Approx(mean_over({5, 6})));
    CHECK(*report.groups.all == doctest::Approx(mean_over({0, 1, 2, 3, 4, 5, 6})));
    CHECK(report.per_class_iou.size() == 7);  // 1 + |C_{1:2}|

    // background excluded on request
    auto no_bg = metrics::iou_report(acc, schedule, 2, nullptr, false);
    CHECK(*no_bg.groups.base == doctest::Approx(mean_over({1, 2, 3, 4})));
}

TEST_CASE("absent classes report null IoU and drop from means") {
    auto schedule = engine::build_task_schedule(2, 1, 1, Setting::overlapped);
    ConfusionAccumulator acc(3);
    LabelMask gt = mask_of({0, 1, 1, 0}, 2, 2);  // class 2 never appears
    std::vector<int> pred{0, 1, 1, 0};
    acc.accumulate(pred, gt);
    auto report = metrics::iou_report(acc, schedule, 2);
    CHECK(!report.per_class_iou[2].has_value());
    CHECK(*report.groups.all == doctest::Approx(1.0));
}

TEST_CASE("forgetting deltas compare against the reference report") {
    auto schedule = engine::build_task_schedule(2, 1, 1, Setting::overlapped);
    ConfusionAccumulator ref_acc(3), cur_acc(3);
    LabelMask gt = mask_of({1, 1, 2, 2, 0, 0}, 2, 3);
    std::vector<int> perfect{1, 1, 2, 2, 0, 0};
    std::vector<int> worse{1, 0, 2, 2, 0, 0};  // one class-1 pixel lost
    ref_acc.accumulate(perfect, gt);
    cur_acc.accumulate(worse, gt);
    auto reference = metrics::iou_report(ref_acc, schedule, 2);
    auto report = metrics::iou_report(cur_acc, schedule, 2, &reference);
    CHECK(report.forgetting[1] == doctest::Approx(1.0 - 0.5));
    CHECK(report.forgetting[2] == doctest::Approx(0.0));
}

TEST_CASE("report json round trip preserves every field") {
    namespace fs = std::filesystem;
    MetricsReport r;
    r.step = 2;
    r.per_class_iou[0] = 0.961038961038961;
    r.per_class_iou[1] = std::nullopt;
    r.per_class_iou[5] = 0.123456789012345;
    r.groups.base = 0.5;
    r.groups.novel = std::nullopt;
    r.groups.all = 0.25;
    r.forgetting[3] = -0.0625;

    fs::path p = fs::temp_directory_path() / "consept_metrics_test.json";
    metrics::write_report(r, p.string());
    auto back = metrics::read_report(p.string());
    CHECK(back.step == r.step);
    CHECK(back.per_class_iou.size() == 3);
    CHECK(*back.per_class_iou[0] == r.per_class_iou[0]);
    CHECK(!back.per_class_iou[1].has_value());
    CHECK(*back.per_class_iou[5] == r.per_class_iou[5]);
    CHECK(*back.groups.base == 0.5);
    CHECK(!back.groups.novel.has_value());
    CHECK(back.forgetting[3] == -0.0625);
    fs::remove(p);
}

TEST_CASE("schema mismatch raises") {
    namespace fs = std::filesystem;
    fs::path p = fs::temp_directory_path() / "consept_bad_metrics.json";
    std::ofstream f(p);
    f << "{\"step\": 1}";
    f.close();
    CHECK_THROWS((void)metrics::read_report(p.string()));
    fs::remove(p);
}

TEST_CASE("summary csv keeps step ordering") {
    namespace fs = std::filesystem;
    std::vector<MetricsReport> reports(3);
    for (int t = 0; t < 3; ++t) {
        reports[static_cast<size_t>(t)].step = t + 1;
        reports[static_cast<size_t>(t)].groups.all = 0.5 + 0.1 * t;
    }
    fs::path p = fs::temp_directory_path() / "consept_summary_test.csv";
    metrics::write_summary_csv(reports, p.string());
    std::ifstream f(p);
    std::string line;
    std::getline(f, line);
    CHECK(line == "step,miou_base,miou_novel,miou_all");
    int t = 1;
    while (std::getline(f, line)) {
        CHECK(line.rfind(std::to_string(t) + ",", 0) == 0);
        ++t;
    }
    CHECK(t == 4);
    fs::remove(p);
}

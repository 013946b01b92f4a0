#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "consept/mask.hpp"
#include "consept/schedule.hpp"

namespace consept::metrics {

// Pixel-count confusion matrix; rows = ground truth, cols = prediction.
// Accumulators merge associatively, so evaluation can be sharded.
class ConfusionAccumulator {
public:
    explicit ConfusionAccumulator(int num_classes_with_bg);

    void accumulate(const std::vector<int>& pred_labels, const LabelMask& gt);
    void merge(const ConfusionAccumulator& other);

    int64_t at(int gt, int pred) const {
        return counts_[static_cast<size_t>(gt) * k_ + static_cast<size_t>(pred)];
    }
    int64_t total() const;
    int size() const { return k_; }

private:
    int k_;
    std::vector<int64_t> counts_;
};

struct GroupMious {
    std::optional<double> base;
    std::optional<double> novel;
    std::optional<double> all;
};

struct MetricsReport {
    int step = 0;
    // IoU per class id; absent classes (never in gt nor pred) are excluded
    std::map<int, std::optional<double>> per_class_iou;
    GroupMious groups;
    std::map<int, double> forgetting;  // reference IoU minus current IoU

    std::optional<double> miou_over(const std::vector<int>& classes) const;
};

// base group = background + C_1 (VOC-style convention, toggleable), novel
// group = C_{2:t}; forgetting deltas computed per class against `reference`
MetricsReport iou_report(const ConfusionAccumulator& acc, const engine::TaskSchedule& schedule,
                         int t, const MetricsReport* reference = nullptr,
                         bool background_in_groups = true);

void write_report(const MetricsReport& report, const std::string& path);
MetricsReport read_report(const std::string& path);

// one row per step: step, miou_base, miou_novel, miou_all
void write_summary_csv(const std::vector<MetricsReport>& reports, const std::string& path);

}  // namespace consept::metrics

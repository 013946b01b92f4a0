#include "consept/metrics.hpp"

#include <json.hpp>

#include <fstream>
#include <stdexcept>

namespace consept::metrics {

using nlohmann::json;

ConfusionAccumulator::ConfusionAccumulator(int num_classes_with_bg)
    : k_(num_classes_with_bg), counts_(static_cast<size_t>(k_) * k_, 0) {}

void ConfusionAccumulator::accumulate(const std::vector<int>& pred_labels, const LabelMask& gt) {
    if (pred_labels.size() != gt.labels.size())
        throw std::invalid_argument("accumulate: prediction/gt size mismatch");
    for (size_t i = 0; i < pred_labels.size(); ++i) {
        int g = gt.labels[i];
        if (g == kIgnoreLabel) continue;
        int p = pred_labels[i];
        if (g < 0 || g >= k_ || p < 0 || p >= k_)
            throw std::invalid_argument("accumulate: label out of range");
        ++counts_[static_cast<size_t>(g) * k_ + static_cast<size_t>(p)];
    }
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
    if (other.k_ != k_) throw std::invalid_argument("merge: size mismatch");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

int64_t ConfusionAccumulator::total() const {
    int64_t t = 0;
    for (int64_t c : counts_) t += c;
    return t;
}

std::optional<double> MetricsReport::miou_over(const std::vector<int>& classes) const {
    double sum = 0.0;
    int n = 0;
    for (int c : classes) {
        auto it = per_class_iou.find(c);
        if (it == per_class_iou.end() || !it->second.has_value()) continue;
        sum += *it->second;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / n;
}

MetricsReport iou_report(const ConfusionAccumulator& acc, const engine::TaskSchedule& schedule,
                         int t, const MetricsReport* reference, bool background_in_groups) {
    MetricsReport report;
    report.step = t;

    std::vector<int> scored{0};
    auto seen = schedule.classes_up_to(t);
    scored.insert(scored.end(), seen.begin(), seen.end());

    for (int c : scored) {
        int64_t tp = acc.at(c, c);
        int64_t fp = 0, fn = 0;
        for (int o = 0; o < acc.size(); ++o) {
            if (o == c) continue;
            fp += acc.at(o, c);
            fn += acc.at(c, o);
        }
        if (tp + fp + fn == 0) {
            report.per_class_iou[c] = std::nullopt;  // class absent everywhere
        } else {
            report.per_class_iou[c] =
                static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        }
    }

    std::vector<int> base_group = schedule.partitions[0];
    if (background_in_groups) base_group.insert(base_group.begin(), 0);
    std::vector<int> novel_group;
    for (int s = 1; s < t; ++s)
        novel_group.insert(novel_group.end(), schedule.partitions[static_cast<size_t>(s)].begin(),
                           schedule.partitions[static_cast<size_t>(s)].end());
    std::vector<int> all_group = background_in_groups ? scored : seen;

    report.groups.base = report.miou_over(base_group);
    report.groups.novel = report.miou_over(novel_group);
    report.groups.all = report.miou_over(all_group);

    if (reference) {
        for (const auto& [cls, iou] : report.per_class_iou) {
            if (!iou.has_value()) continue;
            auto it = reference->per_class_iou.find(cls);
            if (it == reference->per_class_iou.end() || !it->second.has_value()) continue;
            report.forgetting[cls] = *it->second - *iou;
        }
    }
    return report;
}

namespace {

json optional_to_json(const std::optional<double>& v) {
    if (v.has_value()) return *v;
    return nullptr;
}

std::optional<double> optional_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

}  // namespace

void write_report(const MetricsReport& report, const std::string& path) {
    json j;
    j["step"] = report.step;
    json per;
    for (const auto& [cls, iou] : report.per_class_iou)
        per[std::to_string(cls)] = optional_to_json(iou);
    j["per_class_iou"] = std::move(per);
    j["groups"] = json{{"base", optional_to_json(report.groups.base)},
                       {"novel", optional_to_json(report.groups.novel)},
                       {"all", optional_to_json(report.groups.all)}};
    json forg;
    for (const auto& [cls, d] : report.forgetting) forg[std::to_string(cls)] = d;
    j["forgetting"] = std::move(forg);

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("write_report: cannot open " + path);
    f << j.dump(2) << "\n";
}

MetricsReport read_report(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_report: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("read_report: parse error: " + std::string(e.what()));
    }
    MetricsReport report;
    try {
        report.step = j.at("step").get<int>();
        for (const auto& [key, val] : j.at("per_class_iou").items())
            report.per_class_iou[std::stoi(key)] = optional_from_json(val);
        report.groups.base = optional_from_json(j.at("groups").at("base"));
        report.groups.novel = optional_from_json(j.at("groups").at("novel"));
        report.groups.all = optional_from_json(j.at("groups").at("all"));
        for (const auto& [key, val] : j.at("forgetting").items())
            report.forgetting[std::stoi(key)] = val.get<double>();
    } catch (const json::exception& e) {
        throw std::runtime_error("read_report: schema mismatch: " + std::string(e.what()));
    }
    return report;
}

void write_summary_csv(const std::vector<MetricsReport>& reports, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("write_summary_csv: cannot open " + path);
    f << "step,miou_base,miou_novel,miou_all\n";
    auto cell = [](const std::optional<double>& v) {
        if (!v.has_value()) return std::string();
        char buf[32];
        snprintf(buf, sizeof(buf), "%.6f", *v);
        return std::string(buf);
    };
    for (const auto& r : reports)
        f << r.step << "," << cell(r.groups.base) << "," << cell(r.groups.novel) << ","
          << cell(r.groups.all) << "\n";
}

}  // namespace consept::metrics

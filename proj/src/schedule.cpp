#include "consept/schedule.hpp"

#include <algorithm>
#include <stdexcept>

namespace consept::engine {

Setting setting_from_string(const std::string& s) {
    if (s == "overlapped") return Setting::overlapped;
    if (s == "disjoint") return Setting::disjoint;
    throw std::invalid_argument("unknown setting '" + s + "' (overlapped|disjoint)");
}

std::string to_string(Setting s) {
    return s == Setting::overlapped ? "overlapped" : "disjoint";
}

std::vector<int> TaskSchedule::classes_up_to(int t) const {
    std::vector<int> out;
    for (int s = 0; s < t && s < num_steps(); ++s)
        out.insert(out.end(), partitions[static_cast<size_t>(s)].begin(),
                   partitions[static_cast<size_t>(s)].end());
    return out;
}

std::vector<int> TaskSchedule::channel_classes(int t) const {
    std::vector<int> out{0};
    auto seen = classes_up_to(t);
    out.insert(out.end(), seen.begin(), seen.end());
    return out;
}

std::vector<int> TaskSchedule::channel_of_class(int t, int max_class_id) const {
    std::vector<int> map(static_cast<size_t>(max_class_id) + 1, -1);
    auto chans = channel_classes(t);
    for (size_t ch = 0; ch < chans.size(); ++ch) {
        int cls = chans[ch];
        if (cls <= max_class_id) map[static_cast<size_t>(cls)] = static_cast<int>(ch);
    }
    return map;
}

bool TaskSchedule::seen_by(int cls, int t) const {
    if (cls == 0) return true;
    for (int s = 0; s < t && s < num_steps(); ++s)
        for (int c : partitions[static_cast<size_t>(s)])
            if (c == cls) return true;
    return false;
}

int TaskSchedule::step_of_class(int cls) const {
    for (int s = 0; s < num_steps(); ++s)
        for (int c : partitions[static_cast<size_t>(s)])
            if (c == cls) return s + 1;
    return 0;
}

TaskSchedule build_task_schedule(int num_classes, int x, int y, Setting setting) {
    if (x < 1 || x > num_classes)
        throw std::invalid_argument("build_task_schedule: X out of range");
    int rest = num_classes - x;
    if (rest > 0 && (y < 1 || rest % y != 0))
        throw std::invalid_argument(
            "build_task_schedule: remaining classes not divisible into Y-sized steps");
    TaskSchedule sched;
    sched.setting = setting;
    std::vector<int> base;
    for (int c = 1; c <= x; ++c) base.push_back(c);
    sched.partitions.push_back(std::move(base));
    for (int c = x + 1; c <= num_classes; c += y) {
        std::vector<int> part;
        for (int k = 0; k < y; ++k) part.push_back(c + k);
        sched.partitions.push_back(std::move(part));
    }
    return sched;
}

FilteredSample filter_annotations(const LabelMask& full_gt, const TaskSchedule& schedule, int t) {
    const auto& current = schedule.partitions[static_cast<size_t>(t - 1)];
    auto in_current = [&](int lbl) {
        return std::find(current.begin(), current.end(), lbl) != current.end();
    };

    bool has_current = false;
    bool has_unseen = false;
    for (uint8_t lbl : full_gt.labels) {
        if (lbl == 0 || lbl == kIgnoreLabel) continue;
        if (in_current(lbl)) has_current = true;
        else if (!schedule.seen_by(lbl, t)) has_unseen = true;
    }

    FilteredSample out;
    out.keep = has_current && (schedule.setting == Setting::overlapped || !has_unseen);
    if (!out.keep) return out;

    out.mask = full_gt;
    for (auto& lbl : out.mask.labels) {
        if (lbl == kIgnoreLabel) continue;
        if (lbl != 0 && !in_current(lbl)) lbl = 0;
    }
    return out;
}

}  // namespace consept::engine

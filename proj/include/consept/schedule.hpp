#pragma once

#include <string>
#include <vector>

#include "consept/mask.hpp"

namespace consept::engine {

enum class Setting { overlapped, disjoint };

Setting setting_from_string(const std::string& s);
std::string to_string(Setting s);

// Ordered disjoint class partitions C_1..C_T. Class ids are 1..K; background
// (0) belongs to no partition.
struct TaskSchedule {
    std::vector<std::vector<int>> partitions;
    Setting setting = Setting::overlapped;

    int num_steps() const { return static_cast<int>(partitions.size()); }
    int base_count() const { return static_cast<int>(partitions[0].size()); }

    // classes of steps 1..t in channel order
    std::vector<int> classes_up_to(int t) const;
    // channel -> class id for score maps at step t (channel 0 = background)
    std::vector<int> channel_classes(int t) const;
    // class id -> channel at step t (-1 when the class is not yet seen)
    std::vector<int> channel_of_class(int t, int max_class_id) const;
    bool seen_by(int cls, int t) const;
    int step_of_class(int cls) const;  // 1-based; 0 if unknown
};

// C_1 = first X ids ascending, then chunks of Y; throws on indivisible remainder
TaskSchedule build_task_schedule(int num_classes, int x, int y, Setting setting);

// Relabels classes outside C_t to background and decides sample inclusion:
// overlapped keeps images containing any C_t pixel, disjoint additionally
// rejects images containing classes not yet seen.
struct FilteredSample {
    bool keep = false;
    LabelMask mask;  // only meaningful when keep
};
FilteredSample filter_annotations(const LabelMask& full_gt, const TaskSchedule& schedule, int t);

}  // namespace consept::engine

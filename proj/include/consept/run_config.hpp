#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "consept/data.hpp"
#include "consept/model.hpp"
#include "consept/schedule.hpp"
#include "consept/trainer.hpp"

namespace consept::cli {

// Flat dotted-key configuration. One source of truth for defaults; files and
// command-line flags mirror the same key names, unknown keys are rejected.
class RunConfig {
public:
    static RunConfig defaults();
    static const std::vector<std::pair<std::string, std::string>>& default_entries();

    void load_file(const std::string& path);  // "key = value" lines, '#' comments
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    int get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    uint64_t get_u64(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;  // comma-separated

    // canonical "key = value" listing (sorted); its hash names run directories
    std::string canonical() const;
    uint64_t hash() const;
    std::string hash_hex() const;

    data::SceneSpec scene_spec() const;
    model::ModelConfig model_config() const;
    engine::TaskSchedule schedule() const;
    engine::TrainConfig train_config() const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace consept::cli

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "consept/data.hpp"
#include "consept/run_config.hpp"

namespace consept::cli {

struct AblationVariant {
    std::string name;
    std::map<std::string, std::string> overrides;  // applied over the base RunConfig
};

struct AblationPlan {
    std::vector<AblationVariant> variants;
    std::vector<uint64_t> seeds;
};

// the component / distillation / dice / frozen-head / distilled-layer grid
AblationPlan default_plan(const RunConfig& base);
AblationPlan load_plan(const std::string& path, const RunConfig& base);

struct AblationRow {
    std::string variant;
    uint64_t seed = 0;
    std::map<int, std::optional<double>> per_class_iou;  // final step
    double miou_base = 0.0;   // over background + C_1 of the reference schedule
    double miou_novel = 0.0;  // over C_{2:T}
    double miou_all = 0.0;
};

struct VariantStats {
    std::string variant;
    double base_mean = 0.0, base_sd = 0.0;
    double novel_mean = 0.0, novel_sd = 0.0;
    double all_mean = 0.0, all_sd = 0.0;
    int n = 0;
};

struct AblationResult {
    std::vector<AblationRow> rows;       // one per (variant, seed)
    std::vector<VariantStats> stats;     // in plan order
    const VariantStats* find(const std::string& name) const;
};

// fans out (variant, seed) tasks to a small worker pool; per-run artifacts go
// to <out_root>/<variant>_s<seed>_<confighash>/
AblationResult run_ablation(const RunConfig& base, const AblationPlan& plan,
                            const data::Corpus& corpus, const std::string& out_root,
                            int workers);

// summary.csv, summary.md and bar plots under <dir>/plots/
void write_ablation_outputs(const AblationResult& result, const std::string& dir);

}  // namespace consept::cli

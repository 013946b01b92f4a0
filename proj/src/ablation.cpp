#include "consept/ablation.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "consept/png_io.hpp"

namespace consept::cli {

namespace fs = std::filesystem;
using nlohmann::json;

AblationPlan default_plan(const RunConfig& base) {
    AblationPlan plan;
    std::string all_classes = std::to_string(base.get_int("data.num_classes"));
    auto v = [&plan](std::string name, std::map<std::string, std::string> overrides) {
        plan.variants.push_back({std::move(name), std::move(overrides)});
    };
    // joint upper bound: one step over every class
    v("joint", {{"schedule.X", all_classes}, {"schedule.Y", "1"}});
    // (a) frozen plain ViT + linear head
    v("frozen_linear", {{"ablation.adapters", "false"},
                        {"ablation.freeze_backbone", "true"},
                        {"ablation.mse", "false"},
                        {"ablation.contrast", "false"},
                        {"ablation.on_dice", "false"}});
    // (b) + adapters, extractor still frozen after the base task
    v("frozen_adapter", {{"ablation.freeze_backbone", "true"},
                         {"ablation.mse", "false"},
                         {"ablation.contrast", "false"},
                         {"ablation.on_dice", "false"}});
    // fully fine-tuned, no feature constraint (the base-class collapse row)
    v("naive_ft", {{"ablation.adapters", "false"},
                   {"ablation.mse", "false"},
                   {"ablation.contrast", "false"},
                   {"ablation.on_dice", "false"}});
    // (c) tuned + distillation, no dice terms
    v("distill_only", {{"ablation.c_dice", "false"}, {"ablation.on_dice", "false"}});
    // dice grid middle point: class-specific dice only
    v("dice_c", {{"ablation.on_dice", "false"}});
    // (e) full method
    v("full", {});
    // distilled-layer selection: all four scales instead of the deepest
    v("distill_f0123", {{"loss.distill_layers", "0,1,2,3"}});
    // deterministic boundary off
    v("no_freeze_head", {{"ablation.freeze_old_heads", "false"}});

    for (int s : base.get_int_list("ablation.seeds"))
        plan.seeds.push_back(static_cast<uint64_t>(s));
    return plan;
}

AblationPlan load_plan(const std::string& path, const RunConfig& base) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_plan: cannot open " + path);
    json j;
    f >> j;
    AblationPlan plan;
    for (const auto& vj : j.at("variants")) {
        AblationVariant v;
        v.name = vj.at("name").get<std::string>();
        if (vj.contains("overrides"))
            for (const auto& [k, val] : vj.at("overrides").items())
                v.overrides[k] = val.is_string() ? val.get<std::string>() : val.dump();
        plan.variants.push_back(std::move(v));
    }
    if (j.contains("seeds"))
        for (const auto& s : j.at("seeds")) plan.seeds.push_back(s.get<uint64_t>());
    else
        for (int s : base.get_int_list("ablation.seeds"))
            plan.seeds.push_back(static_cast<uint64_t>(s));
    std::vector<std::string> names;
    for (const auto& v : plan.variants) names.push_back(v.name);
    std::sort(names.begin(), names.end());
    if (std::adjacent_find(names.begin(), names.end()) != names.end())
        throw std::runtime_error("load_plan: duplicate variant names");
    return plan;
}

const VariantStats* AblationResult::find(const std::string& name) const {
    for (const auto& s : stats)
        if (s.variant == name) return &s;
    return nullptr;
}

namespace {

double miou_over(const std::map<int, std::optional<double>>& per_class,
                 const std::vector<int>& classes) {
    double sum = 0.0;
    int n = 0;
    for (int c : classes) {
        auto it = per_class.find(c);
        if (it == per_class.end() || !it->second.has_value()) continue;
        sum += *it->second;
        ++n;
    }
    return n > 0 ? sum / n : 0.0;
}

}  // namespace

AblationResult run_ablation(const RunConfig& base, const AblationPlan& plan,
                            const data::Corpus& corpus, const std::string& out_root,
                            int workers) {
    // reference grouping comes from the base config's schedule, so the joint
    // run is comparable to the continual ones
    auto ref_schedule = base.schedule();
    std::vector<int> base_group{0};
    for (int c : ref_schedule.partitions[0]) base_group.push_back(c);
    std::vector<int> novel_group;
    for (size_t s = 1; s < ref_schedule.partitions.size(); ++s)
        for (int c : ref_schedule.partitions[s]) novel_group.push_back(c);
    std::vector<int> all_group{0};
    auto seen = ref_schedule.classes_up_to(ref_schedule.num_steps());
    all_group.insert(all_group.end(), seen.begin(), seen.end());

    struct Task {
        size_t variant_idx;
        uint64_t seed;
    };
    std::vector<Task> tasks;
    for (size_t vi = 0; vi < plan.variants.size(); ++vi)
        for (uint64_t s : plan.seeds) tasks.push_back({vi, s});

    std::vector<AblationRow> rows(tasks.size());
    std::atomic<size_t> next{0};
    std::mutex err_mutex;
    std::string first_error;

    auto worker = [&]() {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            const Task& task = tasks[i];
            const AblationVariant& variant = plan.variants[task.variant_idx];
            try {
                RunConfig cfg = base;
                for (const auto& [k, val] : variant.overrides) cfg.set(k, val);
                cfg.set("train.seed", std::to_string(task.seed));
                cfg.set("data.seed", base.get("data.seed"));  // shared corpus

                std::string run_dir = (fs::path(out_root) /
                                       (variant.name + "_s" + std::to_string(task.seed) + "_" +
                                        cfg.hash_hex().substr(0, 8)))
                                          .string();
                auto result = engine::run_protocol(cfg.schedule(), corpus, cfg.model_config(),
                                                   cfg.train_config(), run_dir);
                const auto& final_report = result.reports.back();
                AblationRow row;
                row.variant = variant.name;
                row.seed = task.seed;
                row.per_class_iou = final_report.per_class_iou;
                row.miou_base = miou_over(row.per_class_iou, base_group);
                row.miou_novel = miou_over(row.per_class_iou, novel_group);
                row.miou_all = miou_over(row.per_class_iou, all_group);
                rows[i] = std::move(row);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (first_error.empty())
                    first_error = variant.name + " seed " + std::to_string(task.seed) + ": " +
                                  e.what();
            }
        }
    };

    int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(tasks.size())));
    std::vector<std::thread> pool;
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (!first_error.empty()) throw std::runtime_error("run_ablation: " + first_error);

    AblationResult result;
    result.rows = std::move(rows);
    for (const auto& variant : plan.variants) {
        VariantStats st;
        st.variant = variant.name;
        std::vector<double> b, n, a;
        for (const auto& row : result.rows) {
            if (row.variant != variant.name) continue;
            b.push_back(row.miou_base);
            n.push_back(row.miou_novel);
            a.push_back(row.miou_all);
        }
        auto mean_sd = [](const std::vector<double>& xs, double& mean, double& sd) {
            mean = 0.0;
            for (double x : xs) mean += x;
            mean /= static_cast<double>(xs.size());
            double var = 0.0;
            for (double x : xs) var += (x - mean) * (x - mean);
            sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
        };
        st.n = static_cast<int>(b.size());
        if (st.n > 0) {
            mean_sd(b, st.base_mean, st.base_sd);
            mean_sd(n, st.novel_mean, st.novel_sd);
            mean_sd(a, st.all_mean, st.all_sd);
        }
        result.stats.push_back(std::move(st));
    }
    return result;
}

// ---------------------------------------------------------------------------
// plot rendering: grouped-mIoU bar charts with a built-in 5x7 glyph set
// ---------------------------------------------------------------------------

namespace {

const std::map<char, std::array<uint8_t, 7>>& glyphs() {
    // each byte is one row, bit 4 = leftmost column
    static const std::map<char, std::array<uint8_t, 7>> table = {
        {'0', {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e}},
        {'1', {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e}},
        {'2', {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f}},
        {'3', {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e}},
        {'4', {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02}},
        {'5', {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e}},
        {'6', {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e}},
        {'7', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
        {'8', {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e}},
        {'9', {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c}},
        {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c}},
        {'-', {0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00}},
        {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f}},
        {'A', {0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11}},
        {'B', {0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e}},
        {'C', {0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e}},
        {'D', {0x1c, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1c}},
        {'E', {0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f}},
        {'F', {0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10}},
        {'G', {0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f}},
        {'H', {0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11}},
        {'I', {0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e}},
        {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c}},
        {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
        {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f}},
        {'M', {0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11}},
        {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
        {'O', {0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e}},
        {'P', {0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10}},
        {'Q', {0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d}},
        {'R', {0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11}},
        {'S', {0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e}},
        {'T', {0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
        {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e}},
        {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04}},
        {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x1b, 0x11}},
        {'X', {0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11}},
        {'Y', {0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04}},
        {'Z', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f}},
        {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
    };
    return table;
}

struct Canvas {
    int w, h;
    std::vector<uint8_t> rgb;
    Canvas(int w_, int h_) : w(w_), h(h_), rgb(static_cast<size_t>(w_) * h_ * 3, 255) {}
    void px(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
        if (x < 0 || x >= w || y < 0 || y >= h) return;
        size_t i = (static_cast<size_t>(y) * w + x) * 3;
        rgb[i] = r;
        rgb[i + 1] = g;
        rgb[i + 2] = b;
    }
    void fill_rect(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) px(x, y, r, g, b);
    }
    void text(int x, int y, const std::string& s, uint8_t r = 0, uint8_t g = 0, uint8_t b = 0) {
        const auto& table = glyphs();
        int cx = x;
        for (char raw : s) {
            char c = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
            auto it = table.find(c);
            if (it != table.end())
                for (int row = 0; row < 7; ++row)
                    for (int col = 0; col < 5; ++col)
                        if (it->second[static_cast<size_t>(row)] & (1 << (4 - col)))
                            px(cx + col, y + row, r, g, b);
            cx += 6;
        }
    }
};

void render_bar_plot(const std::string& path, const std::string& title,
                     const std::vector<std::pair<std::string, double>>& bars) {
    const int margin_l = 40, margin_r = 12, margin_t = 24, margin_b = 64;
    const int bar_w = 36, gap = 28;
    int plot_w = static_cast<int>(bars.size()) * (bar_w + gap) + gap;
    int w = margin_l + plot_w + margin_r;
    int h = margin_t + 200 + margin_b;
    Canvas canvas(w, h);
    int y0 = margin_t, y1 = margin_t + 200;

    canvas.text(margin_l, 8, title);
    for (int tick = 0; tick <= 5; ++tick) {
        double v = tick / 5.0;
        int y = y1 - static_cast<int>(v * 200);
        for (int x = margin_l; x < w - margin_r; x += 2) canvas.px(x, y, 220, 220, 220);
        char lbl[8];
        snprintf(lbl, sizeof(lbl), "%.1f", v);
        canvas.text(8, y - 3, lbl);
    }

    int x = margin_l + gap;
    for (const auto& [name, value] : bars) {
        int bh = static_cast<int>(std::max(0.0, std::min(1.0, value)) * 200);
        canvas.fill_rect(x, y1 - bh, x + bar_w - 1, y1, 70, 110, 180);
        char vl[8];
        snprintf(vl, sizeof(vl), "%.2f", value);
        canvas.text(x, y1 - bh - 10, vl);
        // vertical label under the bar
        for (size_t i = 0; i < name.size() && i < 9; ++i)
            canvas.text(x + 14, y1 + 6 + static_cast<int>(i) * 8,
                        std::string(1, name[i]));
        x += bar_w + gap;
    }
    for (int yy = y0; yy <= y1; ++yy) canvas.px(margin_l - 1, yy, 0, 0, 0);
    for (int xx = margin_l - 1; xx < w - margin_r; ++xx) canvas.px(xx, y1 + 1, 0, 0, 0);

    data::write_png_rgb(path, canvas.w, canvas.h, canvas.rgb);
}

}  // namespace

void write_ablation_outputs(const AblationResult& result, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "plots");

    std::ofstream csv(fs::path(dir) / "summary.csv", std::ios::trunc);
    csv << "variant,seed,miou_base,miou_novel,miou_all\n";
    char buf[64];
    for (const auto& row : result.rows) {
        snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f", row.miou_base, row.miou_novel,
                 row.miou_all);
        csv << row.variant << "," << row.seed << "," << buf << "\n";
    }
    csv << "\nvariant,n,base_mean,base_sd,novel_mean,novel_sd,all_mean,all_sd\n";
    for (const auto& st : result.stats) {
        snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", st.base_mean, st.base_sd,
                 st.novel_mean, st.novel_sd, st.all_mean, st.all_sd);
        csv << st.variant << "," << st.n << "," << buf << "\n";
    }

    std::ofstream md(fs::path(dir) / "summary.md", std::ios::trunc);
    md << "| variant | base mIoU | novel mIoU | all mIoU |\n";
    md << "|---|---|---|---|\n";
    for (const auto& st : result.stats) {
        snprintf(buf, sizeof(buf), "%.3f ± %.3f | %.3f ± %.3f | %.3f ± %.3f", st.base_mean,
                 st.base_sd, st.novel_mean, st.novel_sd, st.all_mean, st.all_sd);
        md << "| " << st.variant << " | " << buf << " |\n";
    }

    auto plot = [&](const std::string& name, auto getter) {
        std::vector<std::pair<std::string, double>> bars;
        for (const auto& st : result.stats) bars.emplace_back(st.variant, getter(st));
        render_bar_plot((fs::path(dir) / "plots" / (name + ".png")).string(), name, bars);
    };
    plot("miou_base", [](const VariantStats& s) { return s.base_mean; });
    plot("miou_novel", [](const VariantStats& s) { return s.novel_mean; });
    plot("miou_all", [](const VariantStats& s) { return s.all_mean; });
}

}  // namespace consept::cli

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "consept/ablation.hpp"
#include "consept/checkpoint.hpp"
#include "consept/data.hpp"
#include "consept/metrics.hpp"
#include "consept/png_io.hpp"
#include "consept/run_config.hpp"
#include "consept/trainer.hpp"

namespace fs = std::filesystem;
using namespace consept;

namespace {

std::string runs_root() {
    if (const char* env = std::getenv("CONSEPT_RUNS_DIR")) return env;
    return "runs";
}

// every config key doubles as a long option (e.g. --train.base_lr 2e-5)
void add_config_flags(CLI::App* cmd, cli::RunConfig& cfg,
                      std::shared_ptr<std::map<std::string, std::string>> overrides) {
    for (const auto& [key, def] : cli::RunConfig::default_entries()) {
        cmd->add_option_function<std::string>(
               "--" + key,
               [overrides, k = key](const std::string& v) { (*overrides)[k] = v; },
               "config key (default: " + def + ")")
            ->group("Config keys");
    }
    (void)cfg;
}

void apply_overrides(cli::RunConfig& cfg, const std::string& config_file,
                     const std::map<std::string, std::string>& overrides) {
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& [k, v] : overrides) cfg.set(k, v);
}

void echo_config(const cli::RunConfig& cfg, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream f(fs::path(dir) / "run_config.txt", std::ios::trunc);
    f << cfg.canonical();
}

void print_report(const metrics::MetricsReport& r) {
    auto cell = [](const std::optional<double>& v) {
        return v.has_value() ? std::to_string(*v) : std::string("n/a");
    };
    std::cout << "step " << r.step << ": base " << cell(r.groups.base) << ", novel "
              << cell(r.groups.novel) << ", all " << cell(r.groups.all) << "\n";
}

data::Corpus load_or_fail(const std::string& corpus_dir) {
    if (!fs::exists(fs::path(corpus_dir) / "index.json"))
        throw std::runtime_error("corpus not found at " + corpus_dir +
                                 " (run `consept generate` first)");
    return data::load_corpus(corpus_dir);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ConSept: continual semantic segmentation on a synthetic desk-scale corpus"};
    app.require_subcommand(1);

    cli::RunConfig cfg = cli::RunConfig::defaults();
    auto overrides = std::make_shared<std::map<std::string, std::string>>();
    std::string config_file, corpus_dir, out_dir, checkpoint_path, plan_path;
    int workers = 2;
    int eval_step = 0;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_file, "key = value config file");
        add_config_flags(cmd, cfg, overrides);
    };

    auto* gen = app.add_subcommand("generate", "build the synthetic corpus");
    gen->add_option("--corpus", corpus_dir, "corpus directory");
    add_common(gen);

    auto* joint = app.add_subcommand("train-joint", "single-step training over all classes");
    joint->add_option("--corpus", corpus_dir, "corpus directory");
    joint->add_option("--out", out_dir, "run directory (default: content-addressed)");
    add_common(joint);

    auto* cont = app.add_subcommand("train-continual", "X-Y class-incremental protocol");
    cont->add_option("--corpus", corpus_dir, "corpus directory");
    cont->add_option("--out", out_dir, "run directory (default: content-addressed)");
    add_common(cont);

    auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on the validation split");
    eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    eval->add_option("--corpus", corpus_dir, "corpus directory");
    eval->add_option("--out", out_dir, "where to write metrics.json (default: stdout only)");
    eval->add_option("--step", eval_step, "evaluate as of step t (default: all heads)");
    bool dump_masks = false;
    eval->add_flag("--dump-masks", dump_masks, "write color-coded prediction masks as PNGs");
    add_common(eval);

    auto* pre = app.add_subcommand(
        "pretrain", "train the reusable trunks (adapter and plain) on a wide shape corpus");
    pre->add_option("--out", out_dir, "directory for trunk_adapters.ckpt / trunk_plain.ckpt");
    add_common(pre);

    auto* abl = app.add_subcommand("ablate", "run the ablation grid and consolidate results");
    abl->add_option("--corpus", corpus_dir, "corpus directory");
    abl->add_option("--out", out_dir, "output directory (default: content-addressed)");
    abl->add_option("--plan", plan_path, "JSON ablation plan (default: built-in grid)");
    abl->add_option("--workers", workers, "parallel protocol runs");
    add_common(abl);

    CLI11_PARSE(app, argc, argv);

    try {
        apply_overrides(cfg, config_file, *overrides);
        if (corpus_dir.empty()) corpus_dir = (fs::path(runs_root()) / "corpus").string();

        if (gen->parsed()) {
            auto corpus = data::build_corpus(cfg.scene_spec(), cfg.get_int("data.n_train"),
                                             cfg.get_int("data.n_val"));
            data::save_corpus(corpus, corpus_dir);
            std::cout << "corpus: " << corpus.train.size() << " train / " << corpus.val.size()
                      << " val images at " << corpus_dir << "\n";
        } else if (joint->parsed() || cont->parsed()) {
            if (joint->parsed()) {
                cfg.set("schedule.X", cfg.get("data.num_classes"));
                cfg.set("schedule.Y", "1");
            }
            auto corpus = load_or_fail(corpus_dir);
            if (out_dir.empty())
                out_dir = (fs::path(runs_root()) /
                           ((joint->parsed() ? "joint_" : "continual_") + cfg.hash_hex()))
                              .string();
            echo_config(cfg, out_dir);
            auto result = engine::run_protocol(cfg.schedule(), corpus, cfg.model_config(),
                                               cfg.train_config(), out_dir);
            for (const auto& r : result.reports) print_report(r);
            std::cout << "artifacts: " << out_dir << "\n";
        } else if (eval->parsed()) {
            auto corpus = load_or_fail(corpus_dir);
            auto state = model::load_checkpoint(checkpoint_path);
            auto schedule = cfg.schedule();
            int t = eval_step > 0 ? eval_step : state.num_steps();
            auto report = engine::evaluate(state, corpus.val, schedule, t);
            print_report(report);
            if (!out_dir.empty()) {
                fs::create_directories(out_dir);
                metrics::write_report(report, (fs::path(out_dir) / "metrics.json").string());
            }
            if (dump_masks) {
                if (out_dir.empty()) throw std::runtime_error("--dump-masks requires --out");
                fs::create_directories(fs::path(out_dir) / "masks");
                // fixed palette: background dark, classes on distinct hues
                const uint8_t palette[9][3] = {{30, 30, 30},    {230, 80, 80},  {80, 200, 120},
                                               {80, 120, 230},  {230, 200, 60}, {200, 80, 220},
                                               {60, 220, 220},  {240, 140, 40}, {160, 160, 160}};
                auto channel_classes = schedule.channel_classes(t);
                model::BoundModel bound(state, false);
                for (const auto& s : corpus.val) {
                    auto features = bound.backbone_forward(s.image);
                    auto up = bound.predict_masks(features, t);
                    auto labels = model::argmax_labels(up);
                    std::vector<uint8_t> rgb(labels.size() * 3);
                    for (size_t i = 0; i < labels.size(); ++i) {
                        int cls = channel_classes[static_cast<size_t>(labels[i])];
                        for (int c = 0; c < 3; ++c)
                            rgb[i * 3 + static_cast<size_t>(c)] = palette[cls % 9][c];
                    }
                    data::write_png_rgb((fs::path(out_dir) / "masks" /
                                         ("pred_" + std::to_string(s.id) + ".png"))
                                            .string(),
                                        s.mask.w, s.mask.h, rgb);
                }
                std::cout << "masks: " << (fs::path(out_dir) / "masks").string() << "\n";
            }
        } else if (pre->parsed()) {
            if (out_dir.empty())
                out_dir = (fs::path(runs_root()) / "pretrained").string();
            // the trunk learns generic shape features: every family, all classes at once
            cfg.set("data.num_classes", std::to_string(data::num_shape_families()));
            cfg.set("schedule.X", std::to_string(data::num_shape_families()));
            cfg.set("schedule.Y", "1");
            auto corpus = data::build_corpus(cfg.scene_spec(), cfg.get_int("data.n_train"),
                                             cfg.get_int("data.n_val"));
            fs::create_directories(out_dir);
            echo_config(cfg, out_dir);
            for (bool adapters : {true, false}) {
                cfg.set("ablation.adapters", adapters ? "true" : "false");
                fs::path run_dir = fs::path(out_dir) / (adapters ? "run_adapters" : "run_plain");
                auto result = engine::run_protocol(cfg.schedule(), corpus, cfg.model_config(),
                                                   cfg.train_config(), run_dir.string());
                fs::copy_file(result.checkpoint_paths.back(),
                              fs::path(out_dir) /
                                  (adapters ? "trunk_adapters.ckpt" : "trunk_plain.ckpt"),
                              fs::copy_options::overwrite_existing);
                std::cout << (adapters ? "adapter trunk" : "plain trunk") << ": ";
                print_report(result.reports.back());
            }
            std::cout << "trunks: " << out_dir << "\n";
        } else if (abl->parsed()) {
            auto corpus = load_or_fail(corpus_dir);
            if (out_dir.empty())
                out_dir = (fs::path(runs_root()) / ("ablation_" + cfg.hash_hex())).string();
            echo_config(cfg, out_dir);
            auto plan =
                plan_path.empty() ? cli::default_plan(cfg) : cli::load_plan(plan_path, cfg);
            auto result = cli::run_ablation(cfg, plan, corpus, out_dir, workers);
            cli::write_ablation_outputs(result, out_dir);
            for (const auto& st : result.stats)
                std::cout << st.variant << ": base " << st.base_mean << ", novel "
                          << st.novel_mean << ", all " << st.all_mean << " (n=" << st.n << ")\n";
            std::cout << "artifacts: " << out_dir << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "{\"error\":\"" << e.what() << "\"}\n";
        return 1;
    }
    return 0;
}

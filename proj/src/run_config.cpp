#include "consept/run_config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace consept::cli {

const std::vector<std::pair<std::string, std::string>>& RunConfig::default_entries() {
    static const std::vector<std::pair<std::string, std::string>> entries = {
        {"data.num_classes", "6"},
        {"data.image_size", "32"},
        {"data.n_train", "240"},
        {"data.n_val", "60"},
        {"data.min_shapes", "1"},
        {"data.max_shapes", "2"},
        {"data.min_size", "0.45"},
        {"data.max_size", "0.75"},
        {"data.max_rotation", "0.3"},
        {"data.noise", "0.02"},
        {"data.seed", "1"},
        {"model.patch_size", "8"},
        {"model.embed_dim", "48"},
        {"model.vit_depth", "4"},
        {"model.n_groups", "4"},
        {"model.adapter_dim", "24"},
        {"model.num_heads", "4"},
        {"model.scale0", "2"},
        {"schedule.X", "4"},
        {"schedule.Y", "2"},
        {"schedule.setting", "overlapped"},
        {"train.base_epochs", "30"},
        {"train.novel_epoch_fraction", "0.5"},
        {"train.base_lr", "1e-3"},
        {"train.head_lr_multiplier", "10"},
        {"train.weight_decay", "0.01"},
        {"train.poly_power", "0.9"},
        {"train.batch_size", "8"},
        {"train.seed", "1"},
        {"train.pseudo_threshold", "0.7"},
        {"train.loss_at_input_res", "false"},
        {"train.pretrained_dir", ""},
        {"loss.contrast_form", "softmax"},
        {"loss.contrast_temperature", "1.0"},
        {"loss.distill_layers", "3"},
        {"loss.dice_smoothing", "1.0"},
        {"loss.dice_include_background", "true"},
        {"ablation.adapters", "true"},
        {"ablation.freeze_backbone", "false"},
        {"ablation.freeze_old_heads", "true"},
        {"ablation.mse", "true"},
        {"ablation.contrast", "true"},
        {"ablation.c_dice", "true"},
        {"ablation.on_dice", "true"},
        {"ablation.seeds", "1,2,3"},
    };
    return entries;
}

RunConfig RunConfig::defaults() {
    RunConfig c;
    for (const auto& [k, v] : default_entries()) c.kv_[k] = v;
    return c;
}

namespace {
std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}
}  // namespace

void RunConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("RunConfig: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("RunConfig: missing '=' at " + path + ":" +
                                     std::to_string(lineno));
        set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::invalid_argument("RunConfig: unknown key '" + key + "'");
    it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::invalid_argument("RunConfig: unknown key '" + key + "'");
    return it->second;
}

int RunConfig::get_int(const std::string& key) const {
    try {
        return std::stoi(get(key));
    } catch (const std::exception&) {
        throw std::invalid_argument("RunConfig: '" + key + "' is not an integer: " + get(key));
    }
}

double RunConfig::get_double(const std::string& key) const {
    try {
        return std::stod(get(key));
    } catch (const std::exception&) {
        throw std::invalid_argument("RunConfig: '" + key + "' is not a number: " + get(key));
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw std::invalid_argument("RunConfig: '" + key + "' is not a boolean: " + v);
}

uint64_t RunConfig::get_u64(const std::string& key) const {
    try {
        return std::stoull(get(key));
    } catch (const std::exception&) {
        throw std::invalid_argument("RunConfig: '" + key + "' is not an integer: " + get(key));
    }
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(get(key));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        out.push_back(std::stoi(tok));
    }
    return out;
}

std::string RunConfig::canonical() const {
    std::string out;
    for (const auto& [k, v] : kv_) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

uint64_t RunConfig::hash() const {
    std::string c = canonical();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : c) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string RunConfig::hash_hex() const {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash()));
    return std::string(buf, 16);
}

data::SceneSpec RunConfig::scene_spec() const {
    data::SceneSpec s;
    s.num_classes = get_int("data.num_classes");
    s.image_size = get_int("data.image_size");
    s.min_shapes = get_int("data.min_shapes");
    s.max_shapes = get_int("data.max_shapes");
    s.min_size = get_double("data.min_size");
    s.max_size = get_double("data.max_size");
    s.max_rotation = get_double("data.max_rotation");
    s.noise = get_double("data.noise");
    s.seed = get_u64("data.seed");
    return s;
}

model::ModelConfig RunConfig::model_config() const {
    model::ModelConfig m;
    m.image_size = get_int("data.image_size");
    m.patch_size = get_int("model.patch_size");
    m.embed_dim = get_int("model.embed_dim");
    m.vit_depth = get_int("model.vit_depth");
    m.n_groups = get_int("model.n_groups");
    m.adapter_dim = get_int("model.adapter_dim");
    m.num_heads = get_int("model.num_heads");
    int s0 = get_int("model.scale0");
    m.scales = {s0, 2 * s0, 4 * s0, 8 * s0};
    m.use_adapters = get_bool("ablation.adapters");
    m.validate();
    return m;
}

engine::TaskSchedule RunConfig::schedule() const {
    return engine::build_task_schedule(get_int("data.num_classes"), get_int("schedule.X"),
                                       get_int("schedule.Y"),
                                       engine::setting_from_string(get("schedule.setting")));
}

engine::TrainConfig RunConfig::train_config() const {
    engine::TrainConfig t;
    t.base_epochs = get_double("train.base_epochs");
    t.novel_epoch_fraction = get_double("train.novel_epoch_fraction");
    t.base_lr = get_double("train.base_lr");
    t.head_lr_multiplier = get_double("train.head_lr_multiplier");
    t.weight_decay = get_double("train.weight_decay");
    t.poly_power = get_double("train.poly_power");
    t.batch_size = get_int("train.batch_size");
    t.seed = get_u64("train.seed");
    t.pseudo_threshold = get_double("train.pseudo_threshold");
    t.loss_at_input_res = get_bool("train.loss_at_input_res");
    t.pretrained_dir = get("train.pretrained_dir");
    t.use_adapters = get_bool("ablation.adapters");
    t.freeze_backbone_after_base = get_bool("ablation.freeze_backbone");
    t.freeze_old_heads = get_bool("ablation.freeze_old_heads");
    t.use_mse = get_bool("ablation.mse");
    t.use_contrast = get_bool("ablation.contrast");
    t.use_c_dice = get_bool("ablation.c_dice");
    t.use_on_dice = get_bool("ablation.on_dice");
    t.distill_layers = get_int_list("loss.distill_layers");
    const std::string& form = get("loss.contrast_form");
    if (form == "softmax") t.contrast_form = loss::ContrastForm::softmax;
    else if (form == "literal") t.contrast_form = loss::ContrastForm::literal;
    else throw std::invalid_argument("RunConfig: loss.contrast_form must be softmax|literal");
    t.contrast_temperature = get_double("loss.contrast_temperature");
    t.dice_smoothing = get_double("loss.dice_smoothing");
    t.dice_include_background = get_bool("loss.dice_include_background");
    t.validate();
    return t;
}

}  // namespace consept::cli

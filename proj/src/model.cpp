#include "consept/model.hpp"

#include <cmath>
#include <stdexcept>

namespace consept::model {

using nn::Tensor;
using nn::Var;

void ModelConfig::validate() const {
    if (vit_depth % n_groups != 0)
        throw std::invalid_argument("ModelConfig: vit_depth must be divisible by n_groups");
    if (image_size % patch_size != 0)
        throw std::invalid_argument("ModelConfig: image_size must be divisible by patch_size");
    for (int s : scales)
        if (image_size % s != 0)
            throw std::invalid_argument("ModelConfig: image_size must be divisible by every scale");
    for (int i = 1; i < 4; ++i)
        if (scales[static_cast<size_t>(i)] != 2 * scales[static_cast<size_t>(i - 1)])
            throw std::invalid_argument("ModelConfig: scales must double at each level");
    if ((scales[0] & (scales[0] - 1)) != 0)
        throw std::invalid_argument("ModelConfig: scales[0] must be a power of two");
    if (embed_dim % num_heads != 0)
        throw std::invalid_argument("ModelConfig: embed_dim must be divisible by num_heads");
    if (adapter_dim % num_heads != 0)
        throw std::invalid_argument("ModelConfig: adapter_dim must be divisible by num_heads");
    if (image_size <= 0 || patch_size <= 0 || embed_dim <= 0 || adapter_dim <= 0)
        throw std::invalid_argument("ModelConfig: dimensions must be positive");
}

namespace {

Tensor trunc_normal_init(std::vector<int64_t> shape, Rng& rng, double stddev = 0.02) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.trunc_normal(stddev);
    return t;
}

// fan-scaled truncated normal; trains from scratch without warmup, unlike the
// 0.02 constant used for large pretrained ViTs
Tensor xavier_init(std::vector<int64_t> shape, Rng& rng) {
    int64_t fan_out = shape[0], fan_in = shape[1];
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    return trunc_normal_init(std::move(shape), rng, stddev);
}

Tensor kaiming_init(std::vector<int64_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    int64_t fan_in = 1;
    for (size_t i = 1; i < t.shape.size(); ++i) fan_in *= t.shape[i];
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.normal(0.0, stddev);
    return t;
}

}  // namespace

Param& ModelState::add(std::string name, Tensor value, bool is_head, int head_step, bool decay) {
    Param p;
    p.name = std::move(name);
    p.value = std::move(value);
    p.is_head = is_head;
    p.head_step = head_step;
    p.decay = decay;
    index_[p.name] = params.size();
    params.push_back(std::move(p));
    return params.back();
}

Param& ModelState::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("ModelState: unknown parameter " + name);
    return params[it->second];
}

const Param& ModelState::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("ModelState: unknown parameter " + name);
    return params[it->second];
}

void ModelState::rebuild_index() {
    index_.clear();
    for (size_t i = 0; i < params.size(); ++i) index_[params[i].name] = i;
}

uint64_t ModelState::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* ptr, size_t n) {
        const auto* b = static_cast<const unsigned char*>(ptr);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : params) {
        mix(p.name.data(), p.name.size());
        mix(p.value.data.data(), p.value.data.size() * sizeof(double));
    }
    return h;
}

ModelState ModelState::init(const ModelConfig& config, uint64_t seed) {
    config.validate();
    ModelState m;
    m.config = config;
    Rng rng(seed);

    const int d = config.adapter_dim;
    const int e = config.embed_dim;

    if (config.use_adapters) {
        // stem: full-resolution conv, a stride-2 chain down to scales[0], then
        // one conv per coarser scale
        m.add("stem.conv_in.weight", kaiming_init({d, 3, 3, 3}, rng));
        m.add("stem.conv_in.bias", Tensor({d}), false, 0, false);
        int n_down = 0;
        for (int s = config.scales[0]; s > 1; s /= 2) ++n_down;
        for (int i = 0; i < n_down; ++i) {
            std::string base = "stem.conv" + std::to_string(i);
            m.add(base + ".weight", kaiming_init({d, d, 3, 3}, rng));
            m.add(base + ".bias", Tensor({d}), false, 0, false);
        }
        for (int i = 1; i < 4; ++i) {
            std::string base = "stem.down" + std::to_string(i);
            m.add(base + ".weight", kaiming_init({d, d, 3, 3}, rng));
            m.add(base + ".bias", Tensor({d}), false, 0, false);
        }
    }

    // ViT tokenizer
    const int patch_in = 3 * config.patch_size * config.patch_size;
    m.add("patch_embed.weight", xavier_init({e, patch_in}, rng));
    m.add("patch_embed.bias", Tensor({static_cast<int64_t>(e)}), false, 0, false);
    m.add("patch_embed.pos", trunc_normal_init({config.num_vit_tokens(), e}, rng), false, 0,
          false);

    auto add_ln = [&](const std::string& base, int dim) {
        m.add(base + ".gamma", Tensor::full({dim}, 1.0), false, 0, false);
        m.add(base + ".beta", Tensor({dim}), false, 0, false);
    };
    auto add_linear = [&](const std::string& base, int out, int in, bool zero = false) {
        m.add(base + ".weight", zero ? Tensor({out, in}) : xavier_init({out, in}, rng));
        m.add(base + ".bias", Tensor({out}), false, 0, false);
    };

    for (int blk = 0; blk < config.vit_depth; ++blk) {
        std::string base = "vit.block" + std::to_string(blk);
        add_ln(base + ".ln1", e);
        add_linear(base + ".attn.q", e, e);
        add_linear(base + ".attn.k", e, e);
        add_linear(base + ".attn.v", e, e);
        add_linear(base + ".attn.out", e, e);
        add_ln(base + ".ln2", e);
        add_linear(base + ".ffn.fc1", e * config.vit_ffn_mult, e);
        add_linear(base + ".ffn.fc2", e, e * config.vit_ffn_mult);
    }

    if (config.use_adapters) {
        for (int g = 0; g < config.n_groups; ++g) {
            std::string base = "adapter.group" + std::to_string(g);
            // inject: query from the ViT path, key/value from the adapter path
            add_ln(base + ".inject.norm_q", e);
            add_ln(base + ".inject.norm_kv", d);
            add_linear(base + ".inject.q", d, e);
            add_linear(base + ".inject.k", d, d);
            add_linear(base + ".inject.v", d, d);
            add_linear(base + ".inject.out", e, d, /*zero=*/true);
            // update: query from the adapter path, key/value from the ViT path
            add_ln(base + ".update.norm_q", d);
            add_ln(base + ".update.norm_kv", e);
            add_linear(base + ".update.q", d, d);
            add_linear(base + ".update.k", d, e);
            add_linear(base + ".update.v", d, e);
            add_linear(base + ".update.out", d, d, /*zero=*/true);
            add_ln(base + ".update.norm_ffn", d);
            add_linear(base + ".update.ffn.fc1", d * config.adapter_ffn_mult, d);
            add_linear(base + ".update.ffn.fc2", d, d * config.adapter_ffn_mult, /*zero=*/true);
        }
    }

    add_linear("projection", e, config.fused_dim());
    return m;
}

void ModelState::add_head(int num_classes, Rng& rng) {
    int step = num_steps() + 1;
    int channels = num_classes + (step == 1 ? 1 : 0);  // background lives in head 1 only
    std::string base = "head.step" + std::to_string(step);
    add(base + ".weight", xavier_init({channels, config.embed_dim}, rng), true, step);
    // bias starts at the class-frequency prior: foreground channels are rare
    // under per-channel sigmoid training, background is not
    Tensor bias({channels});
    for (int64_t c = 0; c < channels; ++c)
        bias.data[static_cast<size_t>(c)] = (step == 1 && c == 0) ? 0.5 : -2.0;
    add(base + ".bias", std::move(bias), true, step, false);
    head_channels.push_back(channels);
}

BoundModel::BoundModel(const ModelState& state, bool train)
    : cfg_(state.config), head_channels_(state.head_channels) {
    bound_.reserve(state.params.size());
    for (const auto& p : state.params) {
        bool rg = train && !p.frozen;
        bound_.emplace(p.name, nn::leaf(p.value, rg, p.name));
    }
}

Var BoundModel::param(const std::string& name) const {
    auto it = bound_.find(name);
    if (it == bound_.end()) throw std::runtime_error("BoundModel: unknown parameter " + name);
    return it->second;
}

const Tensor* BoundModel::grad_of(const std::string& name) const {
    auto it = bound_.find(name);
    if (it == bound_.end()) return nullptr;
    if (it->second->grad.data.empty()) return nullptr;
    return &it->second->grad;
}

namespace {
Var linear(const BoundModel& m, const Var& x, const std::string& base) {
    return nn::add_rowwise(nn::matmul_nt(x, m.param(base + ".weight")),
                           m.param(base + ".bias"));
}
Var ln(const BoundModel& m, const Var& x, const std::string& base) {
    return nn::layer_norm(x, m.param(base + ".gamma"), m.param(base + ".beta"));
}
}  // namespace

Var BoundModel::stem_forward(const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size ||
        image.dim(2) != cfg_.image_size)
        throw std::invalid_argument("stem_forward: expected [3," +
                                    std::to_string(cfg_.image_size) + "," +
                                    std::to_string(cfg_.image_size) + "] image, got " +
                                    image.shape_str());
    Var x = nn::constant(image);
    x = nn::gelu(nn::conv2d(x, param("stem.conv_in.weight"), param("stem.conv_in.bias"), 1, 1));
    int n_down = 0;
    for (int s = cfg_.scales[0]; s > 1; s /= 2) ++n_down;
    for (int i = 0; i < n_down; ++i) {
        std::string base = "stem.conv" + std::to_string(i);
        x = nn::gelu(nn::conv2d(x, param(base + ".weight"), param(base + ".bias"), 2, 1));
    }
    std::vector<Var> token_groups;
    token_groups.push_back(nn::chw_to_tokens(x));
    for (int i = 1; i < 4; ++i) {
        std::string base = "stem.down" + std::to_string(i);
        x = nn::gelu(nn::conv2d(x, param(base + ".weight"), param(base + ".bias"), 2, 1));
        token_groups.push_back(nn::chw_to_tokens(x));
    }
    return nn::concat_rows(token_groups);  // scale-major order: F0 tokens first
}

Var BoundModel::patch_embed(const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size ||
        image.dim(2) != cfg_.image_size)
        throw std::invalid_argument("patch_embed: bad image shape " + image.shape_str());
    const int p = cfg_.patch_size, g = cfg_.vit_grid();
    Tensor patches({static_cast<int64_t>(g) * g, static_cast<int64_t>(3) * p * p});
    for (int py = 0; py < g; ++py)
        for (int px = 0; px < g; ++px) {
            int64_t row = static_cast<int64_t>(py) * g + px;
            int64_t col = 0;
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        patches.at(row, col++) = image.at(c, py * p + dy, px * p + dx);
        }
    Var tokens = linear(*this, nn::constant(patches), "patch_embed");
    return nn::add(tokens, param("patch_embed.pos"));
}

Var BoundModel::attention(Var q_src, Var kv_src, const std::string& prefix, int attn_dim) const {
    const int heads = cfg_.num_heads;
    const int dh = attn_dim / heads;
    Var q = linear(*this, q_src, prefix + ".q");
    Var k = linear(*this, kv_src, prefix + ".k");
    Var v = linear(*this, kv_src, prefix + ".v");
    double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> ctx;
    ctx.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = nn::slice_cols(q, h * dh, dh);
        Var kh = nn::slice_cols(k, h * dh, dh);
        Var vh = nn::slice_cols(v, h * dh, dh);
        Var attn = nn::softmax_rows(nn::scale(nn::matmul_nt(qh, kh), scl));
        ctx.push_back(nn::matmul(attn, vh));
    }
    return linear(*this, nn::concat_cols(ctx), prefix + ".out");
}

Var BoundModel::vit_block(Var x, int block) const {
    std::string base = "vit.block" + std::to_string(block);
    Var h = ln(*this, x, base + ".ln1");
    x = nn::add(x, attention(h, h, base + ".attn", cfg_.embed_dim));
    Var f = ln(*this, x, base + ".ln2");
    f = linear(*this, nn::gelu(linear(*this, f, base + ".ffn.fc1")), base + ".ffn.fc2");
    return nn::add(x, f);
}

Var BoundModel::adapter_inject(Var x_vit, Var x_ada, int group) const {
    if (x_vit->value.cols() != cfg_.embed_dim || x_ada->value.cols() != cfg_.adapter_dim)
        throw std::invalid_argument("adapter_inject: channel mismatch");
    std::string base = "adapter.group" + std::to_string(group) + ".inject";
    Var q = ln(*this, x_vit, base + ".norm_q");
    Var kv = ln(*this, x_ada, base + ".norm_kv");
    return nn::add(x_vit, attention(q, kv, base, cfg_.adapter_dim));
}

Var BoundModel::adapter_update(Var x_ada, Var x_vit_next, int group) const {
    if (x_ada->value.cols() != cfg_.adapter_dim || x_vit_next->value.cols() != cfg_.embed_dim)
        throw std::invalid_argument("adapter_update: channel mismatch");
    std::string base = "adapter.group" + std::to_string(group) + ".update";
    Var q = ln(*this, x_ada, base + ".norm_q");
    Var kv = ln(*this, x_vit_next, base + ".norm_kv");
    Var x = nn::add(x_ada, attention(q, kv, base, cfg_.adapter_dim));
    Var f = ln(*this, x, base + ".norm_ffn");
    f = linear(*this, nn::gelu(linear(*this, f, base + ".ffn.fc1")), base + ".ffn.fc2");
    return nn::add(x, f);
}

MultiScaleFeatures BoundModel::backbone_forward(const Tensor& image) const {
    MultiScaleFeatures out;
    Var x_vit = patch_embed(image);

    if (!cfg_.use_adapters) {
        for (int blk = 0; blk < cfg_.vit_depth; ++blk) x_vit = vit_block(x_vit, blk);
        out.vit_tokens = x_vit;
        int g = cfg_.vit_grid();
        Var map = nn::tokens_to_chw(x_vit, g, g);
        out.maps = {map};
        out.fused = map;
        out.projected = nn::tokens_to_chw(linear(*this, x_vit, "projection"), g, g);
        return out;
    }

    Var x_ada = stem_forward(image);
    int blk = 0;
    for (int group = 0; group < cfg_.n_groups; ++group) {
        for (int i = 0; i < cfg_.blocks_per_group(); ++i) x_vit = vit_block(x_vit, blk++);
        x_vit = adapter_inject(x_vit, x_ada, group);
        x_ada = adapter_update(x_ada, x_vit, group);
    }
    out.vit_tokens = x_vit;

    // split scale-major token rows back into the four maps
    int64_t off = 0;
    for (int i = 0; i < 4; ++i) {
        int g = cfg_.grid(i);
        Var tok = nn::slice_rows(x_ada, off, static_cast<int64_t>(g) * g);
        out.maps.push_back(nn::tokens_to_chw(tok, g, g));
        off += static_cast<int64_t>(g) * g;
    }

    int g0 = cfg_.grid(0);
    std::vector<Var> fused_tokens;
    fused_tokens.push_back(nn::chw_to_tokens(out.maps[0]));
    for (int i = 1; i < 4; ++i)
        fused_tokens.push_back(nn::chw_to_tokens(nn::bilinear_resize(out.maps[static_cast<size_t>(i)], g0, g0)));
    Var fused_tok = nn::concat_cols(fused_tokens);
    out.fused = nn::tokens_to_chw(fused_tok, g0, g0);
    out.projected = nn::tokens_to_chw(linear(*this, fused_tok, "projection"), g0, g0);
    return out;
}

Var BoundModel::predict_scores(const MultiScaleFeatures& features, int active_steps) const {
    if (active_steps < 1 || active_steps > static_cast<int>(head_channels_.size()))
        throw std::runtime_error("predict_scores: missing head for requested step");
    Var tokens = nn::chw_to_tokens(features.projected);
    std::vector<Var> logits;
    logits.reserve(static_cast<size_t>(active_steps));
    for (int s = 1; s <= active_steps; ++s)
        logits.push_back(linear(*this, tokens, "head.step" + std::to_string(s)));
    Var all = active_steps == 1 ? logits[0] : nn::concat_cols(logits);
    return nn::tokens_to_chw(all, features.projected->value.dim(1),
                             features.projected->value.dim(2));
}

Tensor BoundModel::predict_masks(const MultiScaleFeatures& features, int active_steps) const {
    Var scores = predict_scores(features, active_steps);
    return upsample_scores(scores->value, cfg_.image_size, cfg_.image_size);
}

Tensor upsample_scores(const Tensor& scores, int out_h, int out_w) {
    Var v = nn::bilinear_resize(nn::constant(scores), out_h, out_w);
    return v->value;
}

std::vector<int> argmax_labels(const Tensor& scores) {
    int64_t c = scores.dim(0), h = scores.dim(1), w = scores.dim(2);
    std::vector<int> labels(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) {
        int best = 0;
        double best_v = scores.data[static_cast<size_t>(i)];
        for (int64_t ch = 1; ch < c; ++ch) {
            double v = scores.data[static_cast<size_t>(ch * h * w + i)];
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(ch);
            }
        }
        labels[static_cast<size_t>(i)] = best;
    }
    return labels;
}

}  // namespace consept::model

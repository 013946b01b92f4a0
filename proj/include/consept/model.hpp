#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "consept/autograd.hpp"
#include "consept/rng.hpp"
#include "consept/tensor.hpp"

namespace consept::model {

struct ModelConfig {
    int image_size = 64;
    int patch_size = 8;
    int embed_dim = 64;
    int vit_depth = 8;
    int n_groups = 4;  // adapter interaction points
    int adapter_dim = 32;
    int num_heads = 4;
    std::array<int, 4> scales = {4, 8, 16, 32};  // strides of F0..F3, F0 finest
    bool use_adapters = true;                    // false = plain ViT path, single-scale features
    int vit_ffn_mult = 4;
    int adapter_ffn_mult = 2;

    void validate() const;  // throws std::invalid_argument on violated invariants

    int vit_grid() const { return image_size / patch_size; }
    int num_vit_tokens() const { return vit_grid() * vit_grid(); }
    int grid(int scale_idx) const { return image_size / scales[static_cast<size_t>(scale_idx)]; }
    int num_ada_tokens() const {
        int n = 0;
        for (int i = 0; i < 4; ++i) n += grid(i) * grid(i);
        return n;
    }
    int blocks_per_group() const { return vit_depth / n_groups; }
    // channel width of the fused map entering the projection
    int fused_dim() const { return use_adapters ? 4 * adapter_dim : embed_dim; }
    // spatial grid of the fused/projected maps (and of loss-resolution score maps)
    int feature_grid() const { return use_adapters ? grid(0) : vit_grid(); }
};

// Named parameter tensor: the unit of freezing, checkpointing and optimization.
struct Param {
    std::string name;
    nn::Tensor value;
    bool frozen = false;
    bool is_head = false;  // head params train at 10x lr
    bool decay = true;     // weight decay applies
    int head_step = 0;     // 1-based step for head params, 0 otherwise
};

// All learnable state plus per-step segmentation heads.
class ModelState {
public:
    ModelConfig config;
    std::vector<Param> params;               // creation order is the checkpoint order
    std::vector<int> head_channels;          // output channels per step head

    static ModelState init(const ModelConfig& config, uint64_t seed);

    // Appends the linear head for the next step (+1 background channel on step 1).
    void add_head(int num_classes, Rng& rng);

    int num_steps() const { return static_cast<int>(head_channels.size()); }
    int total_channels() const {
        int n = 0;
        for (int c : head_channels) n += c;
        return n;
    }

    Param& param(const std::string& name);
    const Param& param(const std::string& name) const;
    bool has_param(const std::string& name) const { return index_.count(name) > 0; }

    ModelState snapshot() const { return *this; }  // deep copy by value semantics
    uint64_t content_hash() const;                 // over all parameter bytes

    void rebuild_index();

private:
    std::unordered_map<std::string, size_t> index_;
    Param& add(std::string name, nn::Tensor value, bool is_head = false, int head_step = 0,
               bool decay = true);
    friend class BoundModel;
};

// The four feature maps plus fusion products of one forward pass.
struct MultiScaleFeatures {
    std::vector<nn::Var> maps;  // F0..F3 as [adapter_dim, h_i, w_i]; single map in plain mode
    nn::Var fused;              // [fused_dim, h0, w0]
    nn::Var projected;          // [embed_dim, h0, w0]
    nn::Var vit_tokens;         // final ViT tokens [Nv, embed_dim] (for equivalence tests)
};

// Binds a ModelState's parameters as autograd leaves for one forward/backward
// round. Frozen parameters bind as constants, so no gradient is ever formed
// for them while gradients still flow through their ops.
class BoundModel {
public:
    BoundModel(const ModelState& state, bool train);

    const ModelConfig& config() const { return cfg_; }

    nn::Var param(const std::string& name) const;

    // stem(I) flattened scale-major: all F0 tokens, then F1, F2, F3 -> [Na, adapter_dim]
    nn::Var stem_forward(const nn::Tensor& image) const;
    // standard ViT tokenizer with learned positional terms -> [Nv, embed_dim]
    nn::Var patch_embed(const nn::Tensor& image) const;
    nn::Var vit_block(nn::Var x, int block) const;
    // x_vit + Attn(norm(x_vit), norm(x_ada), norm(x_ada))
    nn::Var adapter_inject(nn::Var x_vit, nn::Var x_ada, int group) const;
    // cross-attention stage (query = adapter path) then FFN, each pre-norm residual
    nn::Var adapter_update(nn::Var x_ada, nn::Var x_vit_next, int group) const;

    MultiScaleFeatures backbone_forward(const nn::Tensor& image) const;

    // concatenated per-step head logits over steps 1..active_steps -> [C, h0, w0];
    // channel order: background, C_1 classes, C_2 classes, ...
    nn::Var predict_scores(const MultiScaleFeatures& features, int active_steps) const;

    // predict_scores bilinearly upsampled to the input resolution (eval path)
    nn::Tensor predict_masks(const MultiScaleFeatures& features, int active_steps) const;

    // harvest accumulated gradients back to the parameter order (nullptr if none)
    const nn::Tensor* grad_of(const std::string& name) const;

private:
    nn::Var attention(nn::Var q_src, nn::Var kv_src, const std::string& prefix,
                      int attn_dim) const;

    ModelConfig cfg_;
    std::vector<int> head_channels_;
    std::unordered_map<std::string, nn::Var> bound_;
};

// Bilinear upsampling of score maps to the requested resolution (eval path).
nn::Tensor upsample_scores(const nn::Tensor& scores, int out_h, int out_w);

// argmax over channels per pixel -> label indices [h, w] stored as int
std::vector<int> argmax_labels(const nn::Tensor& scores);

}  // namespace consept::model

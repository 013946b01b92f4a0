#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "consept/checkpoint.hpp"
#include "consept/model.hpp"
#include "test_helpers.hpp"

using namespace consept;
using model::BoundModel;
using model::ModelConfig;
using model::ModelState;
using nn::Tensor;
using nn::Var;
using testing::random_image;
using testing::toy_config;

namespace {

ModelConfig desk_config() {
    return ModelConfig{};  // 64px, patch 8, embed 64, depth 8, 4 groups, adapter 32
}

void zero_param(ModelState& state, const std::string& name) {
    for (double& v : state.param(name).value.data) v = 0.0;
}

}  // namespace

TEST_CASE("config invariants are enforced") {
    ModelConfig bad = desk_config();
    bad.vit_depth = 7;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = desk_config();
    bad.image_size = 60;  // not divisible by patch or scales
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = desk_config();
    bad.scales = {4, 8, 12, 24};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_NOTHROW(desk_config().validate());
}

TEST_CASE("stem token count covers the union of scale grids") {
    auto cfg = desk_config();
    CHECK(cfg.num_ada_tokens() == 16 * 16 + 8 * 8 + 4 * 4 + 2 * 2);  // 340
    ModelState state = ModelState::init(cfg, 3);
    BoundModel bound(state, false);
    Rng rng(5);
    Var tokens = bound.stem_forward(random_image(cfg.image_size, rng));
    CHECK(tokens->value.rows() == 340);
    CHECK(tokens->value.cols() == cfg.adapter_dim);
}

TEST_CASE("zero image through the zero-bias stem stays zero") {
    auto cfg = desk_config();
    ModelState state = ModelState::init(cfg, 3);  // biases initialize to zero
    BoundModel bound(state, false);
    Var tokens = bound.stem_forward(Tensor({3, cfg.image_size, cfg.image_size}));
    for (double v : tokens->value.data) CHECK(v == 0.0);
}

TEST_CASE("stem golden tokens stay frozen") {
    auto cfg = desk_config();
    ModelState state = ModelState::init(cfg, 42);
    Rng rng(1234);
    Tensor image = random_image(cfg.image_size, rng);
    Var tokens = BoundModel(state, false).stem_forward(image);

    namespace fs = std::filesystem;
    fs::path golden = fs::path(GOLDEN_DIR) / "stem_tokens.f64";
    if (std::getenv("CONSEPT_REGEN_GOLDEN")) {
        std::ofstream out(golden, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(tokens->value.data.data()),
                  static_cast<std::streamsize>(tokens->value.data.size() * sizeof(double)));
        MESSAGE("regenerated ", golden.string());
        return;
    }
    REQUIRE(fs::exists(golden));
    std::ifstream in(golden, std::ios::binary);
    std::vector<double> expected(tokens->value.data.size());
    in.read(reinterpret_cast<char*>(expected.data()),
            static_cast<std::streamsize>(expected.size() * sizeof(double)));
    REQUIRE(in.gcount() == static_cast<std::streamsize>(expected.size() * sizeof(double)));
    for (size_t i = 0; i < expected.size(); ++i)
        CHECK(tokens->value.data[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("patch embedding basics") {
    auto cfg = desk_config();
    ModelState state = ModelState::init(cfg, 3);
    BoundModel bound(state, false);
    Rng rng(9);
    Tensor image = random_image(cfg.image_size, rng);

    Var t1 = bound.patch_embed(image);
    CHECK(t1->value.rows() == 64);
    CHECK(t1->value.cols() == cfg.embed_dim);

    Var t2 = bound.patch_embed(image);  // determinism
    for (size_t i = 0; i < t1->value.data.size(); ++i)
        CHECK(t1->value.data[i] == t2->value.data[i]);

    Tensor bad({3, 32, 32});
    CHECK_THROWS_AS(bound.patch_embed(bad), std::invalid_argument);
}

TEST_CASE("permuting input patches permutes tokens when positions are zeroed") {
    auto cfg = desk_config();
    ModelState state = ModelState::init(cfg, 3);
    zero_param(state, "patch_embed.pos");
    BoundModel bound(state, false);
    Rng rng(21);
    Tensor image = random_image(cfg.image_size, rng);

    // swap two patch blocks of the image: (0,0) <-> (1,2)
    const int p = cfg.patch_size, g = cfg.vit_grid();
    Tensor swapped = image;
    for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
                std::swap(swapped.at(c, 0 * p + dy, 0 * p + dx),
                          swapped.at(c, 1 * p + dy, 2 * p + dx));

    Var base = bound.patch_embed(image);
    Var perm = bound.patch_embed(swapped);
    int row_a = 0 * g + 0, row_b = 1 * g + 2;
    for (int64_t j = 0; j < base->value.cols(); ++j) {
        CHECK(perm->value.at(row_a, j) == doctest::Approx(base->value.at(row_b, j)));
        CHECK(perm->value.at(row_b, j) == doctest::Approx(base->value.at(row_a, j)));
    }
    // untouched patch rows stay identical
    for (int64_t j = 0; j < base->value.cols(); ++j)
        CHECK(perm->value.at(5, j) == base->value.at(5, j));
}

TEST_CASE("adapter injection is the identity at zero-initialized output projections") {
    auto cfg = toy_config();
    ModelState state = ModelState::init(cfg, 7);
    BoundModel bound(state, false);
    Rng rng(11);
    Tensor image = random_image(cfg.image_size, rng);
    Var x_vit = bound.patch_embed(image);
    Var x_ada = bound.stem_forward(image);
    Var injected = bound.adapter_inject(x_vit, x_ada, 0);
    for (size_t i = 0; i < x_vit->value.data.size(); ++i)
        CHECK(injected->value.data[i] == x_vit->value.data[i]);
    Var updated = bound.adapter_update(x_ada, x_vit, 0);
    for (size_t i = 0; i < x_ada->value.data.size(); ++i)
        CHECK(updated->value.data[i] == x_ada->value.data[i]);
}

TEST_CASE("single-token cross-attention matches the closed form") {
    auto cfg = toy_config();
    cfg.num_heads = 1;
    ModelState state = ModelState::init(cfg, 13);
    Rng rng(17);
    // hand-set the inject projections of group 0
    auto randomize = [&](const std::string& name, double s) {
        for (double& v : state.param(name).value.data) v = rng.normal(0.0, s);
    };
    randomize("adapter.group0.inject.out.weight", 0.5);
    randomize("adapter.group0.inject.out.bias", 0.2);

    Tensor x_vit({1, cfg.embed_dim});
    Tensor x_ada({1, cfg.adapter_dim});
    for (double& v : x_vit.data) v = rng.normal(0.0, 1.0);
    for (double& v : x_ada.data) v = rng.normal(0.0, 1.0);

    BoundModel bound(state, false);
    Var out = bound.adapter_inject(nn::constant(x_vit), nn::constant(x_ada), 0);

    // by hand: out = x_vit + Wo (softmax(scalar) * Wv norm(x_ada) + bv) + bo,
    // and softmax over a single key is 1
    auto ln_1row = [&](const Tensor& x, const std::string& base) {
        const auto& gamma = state.param(base + ".gamma").value;
        const auto& beta = state.param(base + ".beta").value;
        int64_t n = x.numel();
        double mu = 0, var = 0;
        for (double v : x.data) mu += v;
        mu /= static_cast<double>(n);
        for (double v : x.data) var += (v - mu) * (v - mu);
        var /= static_cast<double>(n);
        Tensor out_t = x;
        for (int64_t i = 0; i < n; ++i)
            out_t.data[static_cast<size_t>(i)] =
                (x.data[static_cast<size_t>(i)] - mu) / std::sqrt(var + 1e-6) *
                    gamma.data[static_cast<size_t>(i)] +
                beta.data[static_cast<size_t>(i)];
        return out_t;
    };
    auto apply_linear = [&](const Tensor& x, const std::string& base) {
        const auto& w = state.param(base + ".weight").value;
        const auto& b = state.param(base + ".bias").value;
        Tensor out_t({1, w.rows()});
        for (int64_t o = 0; o < w.rows(); ++o) {
            double acc = b.data[static_cast<size_t>(o)];
            for (int64_t i = 0; i < w.cols(); ++i)
                acc += x.data[static_cast<size_t>(i)] * w.at(o, i);
            out_t.data[static_cast<size_t>(o)] = acc;
        }
        return out_t;
    };
    Tensor kv_norm = ln_1row(x_ada, "adapter.group0.inject.norm_kv");
    Tensor v_vec = apply_linear(kv_norm, "adapter.group0.inject.v");
    Tensor o_vec = apply_linear(v_vec, "adapter.group0.inject.out");
    for (int64_t j = 0; j < cfg.embed_dim; ++j)
        CHECK(out->value.at(0, j) ==
              doctest::Approx(x_vit.at(0, j) + o_vec.data[static_cast<size_t>(j)])
                  .epsilon(1e-10));
}

TEST_CASE("adapter update with zeroed attention reduces to the standalone FFN") {
    auto cfg = toy_config();
    ModelState state = ModelState::init(cfg, 19);
    Rng rng(23);
    auto randomize = [&](const std::string& name, double s) {
        for (double& v : state.param(name).value.data) v = rng.normal(0.0, s);
    };
    // attention out stays zero; give the FFN real weights
    randomize("adapter.group0.update.ffn.fc1.weight", 0.4);
    randomize("adapter.group0.update.ffn.fc1.bias", 0.1);
    randomize("adapter.group0.update.ffn.fc2.weight", 0.4);
    randomize("adapter.group0.update.ffn.fc2.bias", 0.1);

    Tensor x_ada({2, cfg.adapter_dim});
    Tensor x_vit({3, cfg.embed_dim});
    for (double& v : x_ada.data) v = rng.normal(0.0, 1.0);
    for (double& v : x_vit.data) v = rng.normal(0.0, 1.0);

    BoundModel bound(state, false);
    Var out = bound.adapter_update(nn::constant(x_ada), nn::constant(x_vit), 0);

    // standalone FFN oracle: y = x + fc2(gelu(fc1(LN(x))))
    Var x = nn::constant(x_ada);
    Var h = nn::layer_norm(
        x, nn::constant(state.param("adapter.group0.update.norm_ffn.gamma").value),
        nn::constant(state.param("adapter.group0.update.norm_ffn.beta").value));
    h = nn::add_rowwise(
        nn::matmul_nt(h, nn::constant(state.param("adapter.group0.update.ffn.fc1.weight").value)),
        nn::constant(state.param("adapter.group0.update.ffn.fc1.bias").value));
    h = nn::gelu(h);
    h = nn::add_rowwise(
        nn::matmul_nt(h, nn::constant(state.param("adapter.group0.update.ffn.fc2.weight").value)),
        nn::constant(state.param("adapter.group0.update.ffn.fc2.bias").value));
    Var expected = nn::add(x, h);
    for (size_t i = 0; i < out->value.data.size(); ++i)
        CHECK(out->value.data[i] == doctest::Approx(expected->value.data[i]).epsilon(1e-12));
}

TEST_CASE("adapter blocks pass finite-difference gradient checks") {
    auto cfg = toy_config();
    ModelState state = ModelState::init(cfg, 29);
    Rng rng(31);
    // non-trivial projections so gradients are informative
    for (auto& p : state.params)
        if (p.name.find("adapter.group1") != std::string::npos &&
            p.name.find(".out.") != std::string::npos)
            for (double& v : p.value.data) v = rng.normal(0.0, 0.3);
    BoundModel bound(state, false);

    Tensor x_vit({4, cfg.embed_dim});
    Tensor x_ada({5, cfg.adapter_dim});
    for (double& v : x_vit.data) v = rng.normal(0.0, 1.0);

    for (int inst = 0; inst < 3; ++inst) {
        for (double& v : x_ada.data) v = rng.normal(0.0, 1.0);
        double err = nn::gradcheck(
            [&](const Var& v) {
                return nn::sum(nn::square(bound.adapter_inject(nn::constant(x_vit), v, 1)));
            },
            x_ada, 1e-4);
        CHECK(err < 1e-5);
        err = nn::gradcheck(
            [&](const Var& v) {
                return nn::sum(nn::square(bound.adapter_update(v, nn::constant(x_vit), 1)));
            },
            x_ada, 1e-4);
        CHECK(err < 1e-5);
        // gradient w.r.t. the ViT-side input of the update stage
        err = nn::gradcheck(
            [&](const Var& v) {
                return nn::sum(nn::square(bound.adapter_update(nn::constant(x_ada), v, 1)));
            },
            x_vit, 1e-4);
        CHECK(err < 1e-5);
    }
}

TEST_CASE("backbone shapes follow the config") {
    auto cfg = desk_config();
    ModelState state = ModelState::init(cfg, 37);
    BoundModel bound(state, false);
    Rng rng(41);
    auto features = bound.backbone_forward(random_image(cfg.image_size, rng));
    REQUIRE(features.maps.size() == 4);
    int expected[4] = {16, 8, 4, 2};
    for (int i = 0; i < 4; ++i) {
        CHECK(features.maps[static_cast<size_t>(i)]->value.dim(0) == cfg.adapter_dim);
        CHECK(features.maps[static_cast<size_t>(i)]->value.dim(1) == expected[i]);
        CHECK(features.maps[static_cast<size_t>(i)]->value.dim(2) == expected[i]);
    }
    CHECK(features.fused->value.dim(0) == 4 * cfg.adapter_dim);
    CHECK(features.fused->value.dim(1) == 16);
    CHECK(features.projected->value.dim(0) == cfg.embed_dim);
    CHECK(features.projected->value.dim(1) == 16);
}

TEST_CASE("zeroed adapters reproduce a plain ViT forward and the stem passthrough") {
    auto cfg = toy_config();
    ModelState state = ModelState::init(cfg, 43);  // output projections zero at init
    BoundModel bound(state, false);
    Rng rng(47);
    Tensor image = random_image(cfg.image_size, rng);

    auto features = bound.backbone_forward(image);

    // plain ViT oracle: patch embed then all blocks, no adapter ops
    Var x = bound.patch_embed(image);
    for (int blk = 0; blk < cfg.vit_depth; ++blk) x = bound.vit_block(x, blk);
    REQUIRE(features.vit_tokens->value.same_shape(x->value));
    for (size_t i = 0; i < x->value.data.size(); ++i)
        CHECK(features.vit_tokens->value.data[i] == x->value.data[i]);

    // adapter tokens equal the raw stem output, split by scale
    Var stem = bound.stem_forward(image);
    Var f0_tokens = nn::chw_to_tokens(features.maps[0]);
    for (int64_t i = 0; i < f0_tokens->value.rows(); ++i)
        for (int64_t j = 0; j < f0_tokens->value.cols(); ++j)
            CHECK(f0_tokens->value.at(i, j) == stem->value.at(i, j));
}

TEST_CASE("backbone forward is deterministic") {
    auto cfg = toy_config();
    ModelState state = ModelState::init(cfg, 53);
    Rng rng(59);
    Tensor image = random_image(cfg.image_size, rng);
    auto f1 = BoundModel(state, false).backbone_forward(image);
    auto f2 = BoundModel(state, false).backbone_forward(image);
    for (size_t i = 0; i < f1.projected->value.data.size(); ++i)
        CHECK(f1.projected->value.data[i] == f2.projected->value.data[i]);
}

TEST_CASE("end-to-end backbone gradient check on a 3-class toy config") {
    auto cfg = toy_config();
    ModelState state = ModelState::init(cfg, 61);
    Rng head_rng(62);
    state.add_head(3, head_rng);
    Rng rng(63);
    // exercise non-zero adapter paths
    for (auto& p : state.params)
        if (p.name.find(".out.weight") != std::string::npos ||
            p.name.find("ffn.fc2.weight") != std::string::npos)
            for (double& v : p.value.data) v = rng.normal(0.0, 0.2);
    Tensor image = random_image(cfg.image_size, rng);

    auto loss_fn = [&](const model::BoundModel& bm) {
        auto features = bm.backbone_forward(image);
        return nn::mean(nn::square(bm.predict_scores(features, 1)));
    };
    double err = testing::param_gradcheck(state, loss_fn,
                                          [](const std::string&) { return true; }, 3, 101);
    CHECK(err < 1e-4);
}

TEST_CASE("predict_scores concatenates per-step heads in order") {
    auto cfg = toy_config();
    ModelState state = ModelState::init(cfg, 67);
    Rng head_rng(68);
    state.add_head(4, head_rng);  // step 1: 4 classes + background = 5 channels
    state.add_head(2, head_rng);  // step 2: 2 channels
    Rng rng(69);
    Tensor image = random_image(cfg.image_size, rng);

    BoundModel bound(state, false);
    auto features = bound.backbone_forward(image);
    Var s1 = bound.predict_scores(features, 1);
    CHECK(s1->value.dim(0) == 5);
    Var s2 = bound.predict_scores(features, 2);
    CHECK(s2->value.dim(0) == 7);
    CHECK_THROWS(bound.predict_scores(features, 3));  // missing head

    // first five channels of the step-2 map equal the step-1 map
    int64_t n = s1->value.dim(1) * s1->value.dim(2);
    for (int64_t i = 0; i < 5 * n; ++i)
        CHECK(s2->value.data[static_cast<size_t>(i)] == s1->value.data[static_cast<size_t>(i)]);

    // changing head 2 leaves head-1 channels untouched
    ModelState mutated = state;
    for (double& v : mutated.param("head.step2.weight").value.data) v += 0.5;
    BoundModel bound2(mutated, false);
    auto features2 = bound2.backbone_forward(image);
    Var s2b = bound2.predict_scores(features2, 2);
    for (int64_t i = 0; i < 5 * n; ++i)
        CHECK(s2b->value.data[static_cast<size_t>(i)] == s2->value.data[static_cast<size_t>(i)]);
    bool changed = false;
    for (int64_t i = 5 * n; i < 7 * n; ++i)
        if (s2b->value.data[static_cast<size_t>(i)] != s2->value.data[static_cast<size_t>(i)])
            changed = true;
    CHECK(changed);
}

TEST_CASE("single-pixel head logits match the hand computation") {
    auto cfg = toy_config();
    ModelState state = ModelState::init(cfg, 71);
    Rng head_rng(72);
    state.add_head(2, head_rng);

    Tensor feat({cfg.embed_dim, 1, 1});
    Rng rng(73);
    for (double& v : feat.data) v = rng.normal(0.0, 1.0);
    const auto& w = state.param("head.step1.weight").value;
    const auto& b = state.param("head.step1.bias").value;

    model::MultiScaleFeatures features;
    features.projected = nn::constant(feat);
    BoundModel bound(state, false);
    Var scores = bound.predict_scores(features, 1);
    REQUIRE(scores->value.dim(0) == 3);
    for (int64_t ch = 0; ch < 3; ++ch) {
        double expected = b.data[static_cast<size_t>(ch)];
        for (int64_t j = 0; j < cfg.embed_dim; ++j)
            expected += w.at(ch, j) * feat.data[static_cast<size_t>(j)];
        CHECK(scores->value.at(ch, 0, 0) == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("checkpoint round trip is byte-identical") {
    namespace fs = std::filesystem;
    auto cfg = toy_config();
    ModelState state = ModelState::init(cfg, 79);
    Rng head_rng(80);
    state.add_head(3, head_rng);
    state.param("head.step1.weight").frozen = true;

    fs::path dir = fs::temp_directory_path() / "consept_ckpt_test";
    fs::create_directories(dir);
    std::string p1 = (dir / "a.ckpt").string(), p2 = (dir / "b.ckpt").string();
    model::save_checkpoint(state, p1);
    ModelState loaded = model::load_checkpoint(p1);
    model::save_checkpoint(loaded, p2);

    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(p1) == slurp(p2));
    CHECK(loaded.param("head.step1.weight").frozen);
    CHECK(loaded.head_channels == state.head_channels);

    // magic mismatch
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "NOTMAGIC" << std::string(64, 'x');
    bad.close();
    CHECK_THROWS((void)model::load_checkpoint((dir / "bad.ckpt").string()));
    fs::remove_all(dir);
}

TEST_CASE("same seed yields identical initialization") {
    auto cfg = toy_config();
    ModelState a = ModelState::init(cfg, 97);
    ModelState b = ModelState::init(cfg, 97);
    CHECK(a.content_hash() == b.content_hash());
    ModelState c = ModelState::init(cfg, 98);
    CHECK(a.content_hash() != c.content_hash());
}

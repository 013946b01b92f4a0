#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "consept/mask.hpp"
#include "consept/tensor.hpp"

namespace consept::data {

// Procedural scene recipe. Class identity is a fixed bijection onto shape
// families, so classes are separable by geometry, not palette.
struct SceneSpec {
    int num_classes = 6;
    int image_size = 32;
    int min_shapes = 1;
    int max_shapes = 2;
    double min_size = 0.45;  // shape radius as a fraction of image_size/2
    double max_size = 0.75;
    double max_rotation = 0.3;  // radians of per-shape rotation jitter
    double noise = 0.02;
    uint64_t seed = 1;
};

int num_shape_families();

struct LabeledSample {
    nn::Tensor image;  // [3,S,S] in [0,1], quantized to the 8-bit grid
    LabelMask mask;    // labels in {0..K}
    int id = 0;
};

// Deterministic given (spec.seed, sample_id). forced_class > 0 guarantees the
// bottom shape belongs to that class (corpus balancing hook).
LabeledSample generate_scene(const SceneSpec& spec, uint64_t sample_id, int forced_class = 0);

struct Corpus {
    SceneSpec spec;
    std::vector<LabeledSample> train;
    std::vector<LabeledSample> val;
};

// every class appears in >= 5% of training images; throws if the guarantee
// cannot be met after retries
Corpus build_corpus(const SceneSpec& spec, int n_train, int n_val);

// directory layout: images/<id>.png, masks/<id>.raw, index.json
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

}  // namespace consept::data

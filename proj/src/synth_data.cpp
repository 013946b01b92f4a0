#include "consept/data.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "consept/png_io.hpp"
#include "consept/rng.hpp"

namespace consept::data {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Tensor;

namespace {

constexpr int kCorpusVersion = 1;

// inside-tests in shape-local coordinates (u, v), radius-1 footprint
bool inside_family(int family, double u, double v) {
    double au = std::abs(u), av = std::abs(v);
    switch (family) {
        case 0:  // disk
            return u * u + v * v <= 1.0;
        case 1:  // square
            return au <= 0.82 && av <= 0.82;
        case 2: {  // triangle (up)
            if (v < -0.9 || v > 0.75) return false;
            double half = 0.95 * (0.75 - v) / 1.65;
            return au <= half;
        }
        case 3: {  // ring
            double d2 = u * u + v * v;
            return d2 <= 1.0 && d2 >= 0.45 * 0.45;
        }
        case 4:  // stripe
            return au <= 1.0 && av <= 0.32;
        case 5:  // cross
            return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
        case 6:  // diamond
            return au + av <= 1.0;
        case 7: {  // hexagon
            double a = std::abs(0.5 * u + 0.8660254 * v);
            double b = std::abs(0.5 * u - 0.8660254 * v);
            return std::max({au, a, b}) <= 0.9;
        }
        default:
            return false;
    }
}

struct ShapeDraw {
    int cls;
    double cx, cy, radius, angle;
    double color[3];
};

void rasterize(const ShapeDraw& s, Tensor& image, LabelMask& mask) {
    int sz = mask.h;
    double cosa = std::cos(s.angle), sina = std::sin(s.angle);
    int lo_y = std::max(0, static_cast<int>(std::floor(s.cy - s.radius * 1.5)));
    int hi_y = std::min(sz - 1, static_cast<int>(std::ceil(s.cy + s.radius * 1.5)));
    int lo_x = std::max(0, static_cast<int>(std::floor(s.cx - s.radius * 1.5)));
    int hi_x = std::min(sz - 1, static_cast<int>(std::ceil(s.cx + s.radius * 1.5)));
    for (int y = lo_y; y <= hi_y; ++y)
        for (int x = lo_x; x <= hi_x; ++x) {
            double dx = (x + 0.5 - s.cx) / s.radius;
            double dy = (y + 0.5 - s.cy) / s.radius;
            double u = cosa * dx + sina * dy;
            double v = -sina * dx + cosa * dy;
            if (!inside_family(s.cls - 1, u, v)) continue;
            mask.at(y, x) = static_cast<uint8_t>(s.cls);
            for (int c = 0; c < 3; ++c) image.at(c, y, x) = s.color[c];
        }
}

void quantize_to_bytes(Tensor& image) {
    for (double& v : image.data) {
        v = std::min(1.0, std::max(0.0, v));
        v = std::lround(v * 255.0) / 255.0;
    }
}

}  // namespace

int num_shape_families() { return 8; }

LabeledSample generate_scene(const SceneSpec& spec, uint64_t sample_id, int forced_class) {
    if (spec.num_classes < 1 || spec.num_classes > num_shape_families())
        throw std::invalid_argument("generate_scene: num_classes exceeds shape families");
    Rng rng = Rng::split(spec.seed, sample_id);
    int sz = spec.image_size;

    LabeledSample sample;
    sample.id = static_cast<int>(sample_id);
    sample.mask = LabelMask(sz, sz);
    sample.image = Tensor({3, sz, sz});
    double bg[3] = {rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < sz * sz; ++i)
            sample.image.data[static_cast<size_t>(c * sz * sz + i)] = bg[c];

    int n_shapes = rng.range(spec.min_shapes, spec.max_shapes);
    for (int k = 0; k < n_shapes; ++k) {
        ShapeDraw s;
        s.cls = (k == 0 && forced_class > 0) ? forced_class : rng.range(1, spec.num_classes);
        s.radius = rng.uniform(spec.min_size, spec.max_size) * sz / 2.0;
        s.cx = rng.uniform(0.25 * sz, 0.75 * sz);
        s.cy = rng.uniform(0.25 * sz, 0.75 * sz);
        s.angle = rng.uniform(-spec.max_rotation, spec.max_rotation);
        for (double& c : s.color) c = rng.uniform(0.05, 0.95);
        rasterize(s, sample.image, sample.mask);
    }

    if (spec.noise > 0.0)
        for (double& v : sample.image.data) v += rng.normal(0.0, spec.noise);
    quantize_to_bytes(sample.image);
    return sample;
}

Corpus build_corpus(const SceneSpec& spec, int n_train, int n_val) {
    if (n_train <= 0 || n_val <= 0)
        throw std::invalid_argument("build_corpus: split sizes must be positive");

    SceneSpec attempt_spec = spec;
    for (int attempt = 0; attempt < 4; ++attempt) {
        Corpus corpus;
        corpus.spec = spec;
        corpus.train.reserve(static_cast<size_t>(n_train));
        corpus.val.reserve(static_cast<size_t>(n_val));
        // round-robin forced class keeps every class present in both splits;
        // val ids live in a disjoint region of the sample-id stream
        for (int i = 0; i < n_train; ++i)
            corpus.train.push_back(generate_scene(attempt_spec, static_cast<uint64_t>(i),
                                                  1 + i % spec.num_classes));
        for (int i = 0; i < n_val; ++i)
            corpus.val.push_back(generate_scene(attempt_spec,
                                                static_cast<uint64_t>(n_train + i),
                                                1 + i % spec.num_classes));

        std::vector<int> present(static_cast<size_t>(spec.num_classes) + 1, 0);
        for (const auto& s : corpus.train) {
            std::vector<bool> seen(static_cast<size_t>(spec.num_classes) + 1, false);
            for (uint8_t lbl : s.mask.labels)
                if (lbl > 0 && lbl <= spec.num_classes) seen[lbl] = true;
            for (int c = 1; c <= spec.num_classes; ++c)
                if (seen[static_cast<size_t>(c)]) ++present[static_cast<size_t>(c)];
        }
        bool balanced = true;
        for (int c = 1; c <= spec.num_classes; ++c)
            if (present[static_cast<size_t>(c)] * 20 < n_train) balanced = false;
        if (balanced) {
            corpus.spec = attempt_spec;
            return corpus;
        }
        attempt_spec.seed = attempt_spec.seed ^ (0xa5a5a5a5ULL << (attempt + 1));
    }
    throw std::runtime_error("build_corpus: class balance guarantee not achievable");
}

namespace {

json spec_to_json(const SceneSpec& s) {
    return json{{"num_classes", s.num_classes}, {"image_size", s.image_size},
                {"min_shapes", s.min_shapes},   {"max_shapes", s.max_shapes},
                {"min_size", s.min_size},       {"max_size", s.max_size},
                {"max_rotation", s.max_rotation},
                {"noise", s.noise},             {"seed", s.seed}};
}

SceneSpec spec_from_json(const json& j) {
    SceneSpec s;
    s.num_classes = j.at("num_classes").get<int>();
    s.image_size = j.at("image_size").get<int>();
    s.min_shapes = j.at("min_shapes").get<int>();
    s.max_shapes = j.at("max_shapes").get<int>();
    s.min_size = j.at("min_size").get<double>();
    s.max_size = j.at("max_size").get<double>();
    s.max_rotation = j.at("max_rotation").get<double>();
    s.noise = j.at("noise").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    return s;
}

void save_split(const std::vector<LabeledSample>& split, const fs::path& dir) {
    for (const auto& s : split) {
        std::string stem = std::to_string(s.id);
        write_png_rgb((dir / "images" / (stem + ".png")).string(), s.mask.w, s.mask.h,
                      tensor_to_rgb(s.image));
        std::ofstream mf(dir / "masks" / (stem + ".raw"), std::ios::binary | std::ios::trunc);
        mf.write(reinterpret_cast<const char*>(s.mask.labels.data()),
                 static_cast<std::streamsize>(s.mask.labels.size()));
        if (!mf) throw std::runtime_error("save_corpus: mask write failed for id " + stem);
    }
}

LabeledSample load_sample(const fs::path& dir, int id, int image_size) {
    LabeledSample s;
    s.id = id;
    std::string stem = std::to_string(id);
    int w = 0, h = 0;
    auto rgb = read_png_rgb((dir / "images" / (stem + ".png")).string(), w, h);
    if (w != image_size || h != image_size)
        throw std::runtime_error("load_corpus: image size mismatch for id " + stem);
    s.image = rgb_to_tensor(rgb, w, h);
    s.mask = LabelMask(h, w);
    std::ifstream mf(dir / "masks" / (stem + ".raw"), std::ios::binary);
    mf.read(reinterpret_cast<char*>(s.mask.labels.data()),
            static_cast<std::streamsize>(s.mask.labels.size()));
    if (!mf || mf.gcount() != static_cast<std::streamsize>(s.mask.labels.size()))
        throw std::runtime_error("load_corpus: corrupt mask file for id " + stem);
    return s;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::string& dir) {
    fs::path root(dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");

    json index;
    index["version"] = kCorpusVersion;
    index["spec"] = spec_to_json(corpus.spec);
    std::vector<int> train_ids, val_ids;
    for (const auto& s : corpus.train) train_ids.push_back(s.id);
    for (const auto& s : corpus.val) val_ids.push_back(s.id);
    index["train"] = train_ids;
    index["val"] = val_ids;

    save_split(corpus.train, root);
    save_split(corpus.val, root);

    std::ofstream f(root / "index.json", std::ios::trunc);
    f << index.dump(2) << "\n";
    if (!f) throw std::runtime_error("save_corpus: cannot write index.json");
}

Corpus load_corpus(const std::string& dir) {
    fs::path root(dir);
    std::ifstream f(root / "index.json");
    if (!f) throw std::runtime_error("load_corpus: missing index.json in " + dir);
    json index;
    try {
        f >> index;
    } catch (const json::exception& e) {
        throw std::runtime_error("load_corpus: corrupt index.json: " + std::string(e.what()));
    }
    if (!index.contains("version") || index.at("version").get<int>() != kCorpusVersion)
        throw std::runtime_error("load_corpus: unsupported corpus version");

    Corpus corpus;
    corpus.spec = spec_from_json(index.at("spec"));
    for (int id : index.at("train").get<std::vector<int>>())
        corpus.train.push_back(load_sample(root, id, corpus.spec.image_size));
    for (int id : index.at("val").get<std::vector<int>>())
        corpus.val.push_back(load_sample(root, id, corpus.spec.image_size));
    return corpus;
}

}  // namespace consept::data

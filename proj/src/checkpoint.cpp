#include "consept/checkpoint.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace consept::model {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'O', 'N', 'S', 'E', 'P', 'T', '1'};

json config_to_json(const ModelConfig& c) {
    return json{{"image_size", c.image_size},
                {"patch_size", c.patch_size},
                {"embed_dim", c.embed_dim},
                {"vit_depth", c.vit_depth},
                {"n_groups", c.n_groups},
                {"adapter_dim", c.adapter_dim},
                {"num_heads", c.num_heads},
                {"scales", c.scales},
                {"use_adapters", c.use_adapters},
                {"vit_ffn_mult", c.vit_ffn_mult},
                {"adapter_ffn_mult", c.adapter_ffn_mult}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.vit_depth = j.at("vit_depth").get<int>();
    c.n_groups = j.at("n_groups").get<int>();
    c.adapter_dim = j.at("adapter_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.scales = j.at("scales").get<std::array<int, 4>>();
    c.use_adapters = j.at("use_adapters").get<bool>();
    c.vit_ffn_mult = j.at("vit_ffn_mult").get<int>();
    c.adapter_ffn_mult = j.at("adapter_ffn_mult").get<int>();
    return c;
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
    json header;
    header["config"] = config_to_json(state.config);
    header["head_channels"] = state.head_channels;
    json plist = json::array();
    for (const auto& p : state.params) {
        plist.push_back(json{{"name", p.name},
                             {"shape", p.value.shape},
                             {"frozen", p.frozen},
                             {"is_head", p.is_head},
                             {"decay", p.decay},
                             {"head_step", p.head_step}});
    }
    header["params"] = std::move(plist);
    std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(kMagic, 8);
    uint32_t len = static_cast<uint32_t>(hs.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    std::vector<float> buf;
    for (const auto& p : state.params) {
        buf.resize(p.value.data.size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(p.value.data[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic (not a CONSEPT1 file): " + path);
    uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    std::string hs(len, '\0');
    in.read(hs.data(), len);
    if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path);
    json header = json::parse(hs);

    ModelState state;
    state.config = config_from_json(header.at("config"));
    state.head_channels = header.at("head_channels").get<std::vector<int>>();
    for (const auto& pj : header.at("params")) {
        Param p;
        p.name = pj.at("name").get<std::string>();
        auto shape = pj.at("shape").get<std::vector<int64_t>>();
        p.frozen = pj.at("frozen").get<bool>();
        p.is_head = pj.at("is_head").get<bool>();
        p.decay = pj.at("decay").get<bool>();
        p.head_step = pj.at("head_step").get<int>();
        p.value = nn::Tensor(shape);
        std::vector<float> buf(p.value.data.size());
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!in) throw std::runtime_error("load_checkpoint: truncated payload in " + path);
        for (size_t i = 0; i < buf.size(); ++i) p.value.data[i] = static_cast<double>(buf[i]);
        state.params.push_back(std::move(p));
    }
    state.rebuild_index();
    return state;
}

}  // namespace consept::model

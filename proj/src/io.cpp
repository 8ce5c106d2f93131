#include "aimkp/io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "aimkp/errors.hpp"
#include "aimkp/rng.hpp"
#include "json.hpp"

namespace aimkp {

namespace {
constexpr char kMagic[8] = {'A', 'I', 'M', 'K', 'P', 'C', 'K', 'P'};
} // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{
        {"visual_vocab", c.visual_vocab},   {"text_vocab", c.text_vocab},
        {"output_vocab", c.output_vocab},   {"grid_height", c.grid_height},
        {"grid_width", c.grid_width},       {"embed_dim", c.embed_dim},
        {"num_layers", c.num_layers},       {"num_heads", c.num_heads},
        {"max_text_len", c.max_text_len},   {"max_target_len", c.max_target_len},
        {"prompt_len", c.prompt_len},       {"seed", c.seed},
        {"param_budget", c.param_budget},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.visual_vocab = j.at("visual_vocab").get<int>();
    c.text_vocab = j.at("text_vocab").get<int>();
    c.output_vocab = j.at("output_vocab").get<int>();
    c.grid_height = j.at("grid_height").get<int>();
    c.grid_width = j.at("grid_width").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.max_text_len = j.at("max_text_len").get<int>();
    c.max_target_len = j.at("max_target_len").get<int>();
    c.prompt_len = j.at("prompt_len").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.param_budget = j.at("param_budget").get<int64_t>();
    return c;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
    nlohmann::json header = {
        {"config", model_config_to_json(params.config)},
        {"layout_digest", layout_digest(params.layout)},
        {"param_count", params.layout.total},
    };
    std::string header_str = header.dump();

    std::string tmp = path + ".tmp";
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    uint32_t version = kCheckpointVersion;
    uint32_t header_len = static_cast<uint32_t>(header_str.size());
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(reinterpret_cast<const char*>(params.values.data()),
              static_cast<std::streamsize>(params.values.size() * sizeof(double)));
    out.close();
    if (!out) throw DataError("failed writing checkpoint: " + path);
    std::filesystem::rename(tmp, path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("not a checkpoint file: " + path);
    uint32_t version = 0, header_len = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!in || version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version in " + path);
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), header_len);
    if (!in) throw DataError("truncated checkpoint header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad checkpoint header in " + path + ": " + e.what());
    }
    ModelParams params;
    params.config = model_config_from_json(header.at("config"));
    params.layout = build_layout(params.config);
    if (header.at("layout_digest").get<uint64_t>() != layout_digest(params.layout))
        throw DataError("checkpoint layout digest mismatch: " + path);
    int64_t count = header.at("param_count").get<int64_t>();
    if (count != params.layout.total)
        throw DataError("checkpoint parameter count mismatch: " + path);
    params.values.resize(static_cast<size_t>(count));
    in.read(reinterpret_cast<char*>(params.values.data()),
            static_cast<std::streamsize>(params.values.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint parameters: " + path);
    return params;
}

uint64_t param_digest(const ModelParams& params) {
    const char* bytes = reinterpret_cast<const char*>(params.values.data());
    return fnv1a64(std::string_view(bytes, params.values.size() * sizeof(double)));
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return content;
}

void write_file_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open file for writing: " + path);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw DataError("failed writing file: " + path);
    }
    std::filesystem::rename(tmp, path);
}

uint64_t file_digest(const std::string& path) {
    return fnv1a64(read_file(path));
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

} // namespace aimkp

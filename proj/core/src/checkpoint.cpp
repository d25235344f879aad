#include "ltwin/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

using nlohmann::ordered_json;

namespace ltwin {

std::string to_string(AttentionMode m) {
    return m == AttentionMode::causal ? "causal" : "bidirectional";
}

AttentionMode attention_mode_from_string(const std::string & s) {
    if (s == "causal") return AttentionMode::causal;
    if (s == "bidirectional") return AttentionMode::bidirectional;
    fail(ErrorKind::validation, "unknown attention_mode: " + s);
}

void ModelConfig::validate() const {
    if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0 || max_seq_len <= 0)
        fail(ErrorKind::validation, "model config extents must be positive");
    if (d_model % n_heads != 0) fail(ErrorKind::validation, "n_heads must divide d_model");
    const bool bidir = attention_mode == AttentionMode::bidirectional;
    if (bidir != mask_token_id.has_value())
        fail(ErrorKind::validation, "mask_token_id present iff attention_mode is bidirectional");
    if (mask_token_id && (*mask_token_id < 0 || *mask_token_id >= vocab_size))
        fail(ErrorKind::validation, "mask_token_id out of vocabulary");
    if (!(rotary_base > 0.0f)) fail(ErrorKind::validation, "rotary_base must be positive");
}

std::vector<std::pair<std::string, std::vector<int64_t>>> canonical_tensor_shapes(const ModelConfig & cfg) {
    const int64_t d = cfg.d_model;
    const int64_t ff = cfg.d_ff;
    const int64_t v = cfg.vocab_size;
    std::vector<std::pair<std::string, std::vector<int64_t>>> out;
    out.emplace_back("embed.weight", std::vector<int64_t>{v, d});
    for (int i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        out.emplace_back(p + "ln1.gain", std::vector<int64_t>{d});
        out.emplace_back(p + "attn.wq", std::vector<int64_t>{d, d});
        out.emplace_back(p + "attn.wk", std::vector<int64_t>{d, d});
        out.emplace_back(p + "attn.wv", std::vector<int64_t>{d, d});
        out.emplace_back(p + "attn.wo", std::vector<int64_t>{d, d});
        out.emplace_back(p + "ln2.gain", std::vector<int64_t>{d});
        out.emplace_back(p + "mlp.w_up", std::vector<int64_t>{ff, d});
        out.emplace_back(p + "mlp.w_down", std::vector<int64_t>{d, ff});
    }
    out.emplace_back("final_ln.gain", std::vector<int64_t>{d});
    out.emplace_back("lm_head.weight", std::vector<int64_t>{v, d});
    return out;
}

const TensorF32 & Checkpoint::tensor(const std::string & name) const {
    for (const auto & [n, t] : tensors)
        if (n == name) return t;
    fail(ErrorKind::validation, "checkpoint has no tensor named " + name);
}

TensorF32 & Checkpoint::tensor(const std::string & name) {
    for (auto & [n, t] : tensors)
        if (n == name) return t;
    fail(ErrorKind::validation, "checkpoint has no tensor named " + name);
}

bool Checkpoint::has_tensor(const std::string & name) const {
    for (const auto & [n, t] : tensors)
        if (n == name) return true;
    return false;
}

void Checkpoint::validate() const {
    config.validate();
    if (meta.objective != "ar" && meta.objective != "mdlm")
        fail(ErrorKind::validation, "meta.objective must be ar or mdlm");
    const auto canon = canonical_tensor_shapes(config);
    if (tensors.size() != canon.size())
        fail(ErrorKind::validation, "checkpoint tensor count " + std::to_string(tensors.size()) +
                                        " does not match canonical set " + std::to_string(canon.size()));
    for (size_t i = 0; i < canon.size(); ++i) {
        if (tensors[i].first != canon[i].first)
            fail(ErrorKind::validation, "unexpected tensor name " + tensors[i].first + " (expected " +
                                            canon[i].first + ")");
        if (tensors[i].second.shape != canon[i].second)
            fail(ErrorKind::validation, "tensor " + tensors[i].first + " has a non-canonical shape");
        if (tensors[i].second.numel() != TensorF32::numel_of(tensors[i].second.shape))
            fail(ErrorKind::validation, "tensor " + tensors[i].first + " data does not match its shape");
        if (!tensors[i].second.all_finite())
            fail(ErrorKind::validation, "tensor " + tensors[i].first + " contains non-finite values");
    }
}

ordered_json model_config_to_json(const ModelConfig & cfg) {
    ordered_json j;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["d_ff"] = cfg.d_ff;
    j["vocab_size"] = cfg.vocab_size;
    j["max_seq_len"] = cfg.max_seq_len;
    j["attention_mode"] = to_string(cfg.attention_mode);
    if (cfg.mask_token_id)
        j["mask_token_id"] = *cfg.mask_token_id;
    else
        j["mask_token_id"] = nullptr;
    j["rotary_base"] = cfg.rotary_base;
    return j;
}

ModelConfig model_config_from_json(const ordered_json & j) {
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    cfg.attention_mode = attention_mode_from_string(j.at("attention_mode").get<std::string>());
    if (j.contains("mask_token_id") && !j.at("mask_token_id").is_null())
        cfg.mask_token_id = j.at("mask_token_id").get<int>();
    if (j.contains("rotary_base")) cfg.rotary_base = j.at("rotary_base").get<float>();
    return cfg;
}

void write_file_atomic(const std::string & path, const void * bytes, size_t len) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    const fs::path dir = target.parent_path().empty() ? fs::path(".") : target.parent_path();
    const fs::path tmp = dir / (target.filename().string() + ".tmp." + std::to_string(::getpid()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::io, "cannot open " + tmp.string() + " for writing");
        out.write(static_cast<const char *>(bytes), static_cast<std::streamsize>(len));
        if (!out) fail(ErrorKind::io, "short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        fail(ErrorKind::io, "rename to " + path + " failed: " + ec.message());
    }
}

namespace {

constexpr char kMagic[4] = {'L', 'T', 'W', 'N'};
constexpr uint32_t kVersion = 1;

void append_u32(std::string & buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void append_u64(std::string & buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
uint32_t read_u32(const unsigned char * p) {
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
uint64_t read_u64(const unsigned char * p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

} // namespace

void save_container(const Container & c, const std::string & path) {
    ordered_json header;
    header["config"] = c.config;
    header["meta"] = c.meta;
    ordered_json dir = ordered_json::array();
    uint64_t offset = 0;
    for (const auto & [name, t] : c.tensors) {
        ordered_json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["dtype"] = "f32";
        e["offset"] = offset;
        dir.push_back(e);
        offset += static_cast<uint64_t>(t.numel()) * 4;
    }
    header["tensors"] = dir;
    const std::string hjson = header.dump();

    std::string buf;
    buf.reserve(16 + hjson.size() + offset);
    buf.append(kMagic, 4);
    append_u32(buf, kVersion);
    append_u64(buf, hjson.size());
    buf.append(hjson);
    for (const auto & [name, t] : c.tensors) {
        const size_t nbytes = t.data.size() * 4;
        const size_t pos = buf.size();
        buf.resize(pos + nbytes);
        if (nbytes > 0) std::memcpy(buf.data() + pos, t.data.data(), nbytes);
    }
    write_file_atomic(path, buf.data(), buf.size());
}

Container load_container(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const unsigned char * p = reinterpret_cast<const unsigned char *>(buf.data());
    const size_t len = buf.size();

    if (len < 16) fail(ErrorKind::io, path + ": truncated header (file shorter than 16 bytes)");
    if (std::memcmp(p, kMagic, 4) != 0) fail(ErrorKind::io, path + ": bad magic (not an LTWN container)");
    const uint32_t version = read_u32(p + 4);
    if (version != kVersion)
        fail(ErrorKind::io, path + ": unsupported container version " + std::to_string(version));
    const uint64_t header_len = read_u64(p + 8);
    if (16 + header_len > len) fail(ErrorKind::io, path + ": truncated header payload");

    ordered_json header;
    try {
        header = ordered_json::parse(buf.substr(16, header_len));
    } catch (const std::exception & e) {
        fail(ErrorKind::io, path + ": malformed header JSON: " + e.what());
    }

    Container c;
    c.config = header.value("config", ordered_json::object());
    c.meta = header.value("meta", ordered_json::object());

    const size_t payload_start = 16 + header_len;
    const uint64_t payload_len = len - payload_start;
    if (!header.contains("tensors") || !header["tensors"].is_array())
        fail(ErrorKind::io, path + ": header missing tensors array");

    uint64_t expected_offset = 0;
    for (const auto & e : header["tensors"]) {
        const std::string name = e.at("name").get<std::string>();
        std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
        const std::string dtype = e.at("dtype").get<std::string>();
        if (dtype != "f32") fail(ErrorKind::io, path + ": tensor " + name + " has unsupported dtype " + dtype);
        const uint64_t offset = e.at("offset").get<uint64_t>();
        const uint64_t nbytes = static_cast<uint64_t>(TensorF32::numel_of(shape)) * 4;
        if (offset != expected_offset)
            fail(ErrorKind::io, path + ": tensor " + name + " not contiguous in declaration order");
        if (offset + nbytes > payload_len)
            fail(ErrorKind::io, path + ": tensor " + name + " extends beyond payload");
        TensorF32 t(shape);
        if (nbytes > 0) std::memcpy(t.data.data(), buf.data() + payload_start + offset, nbytes);
        c.tensors.emplace_back(name, std::move(t));
        expected_offset = offset + nbytes;
    }
    return c;
}

void save_checkpoint(const Checkpoint & ckpt, const std::string & path) {
    ckpt.validate();
    Container c;
    c.config = model_config_to_json(ckpt.config);
    ordered_json meta;
    meta["objective"] = ckpt.meta.objective;
    meta["seed"] = ckpt.meta.seed;
    meta["tokens_trained"] = ckpt.meta.tokens_trained;
    meta["optimizer_step"] = ckpt.meta.optimizer_step;
    for (const auto & [k, v] : ckpt.meta.extra) meta[k] = v;
    c.meta = meta;
    c.tensors = ckpt.tensors;
    save_container(c, path);
}

Checkpoint load_checkpoint(const std::string & path) {
    Container c = load_container(path);
    Checkpoint ckpt;
    ckpt.config = model_config_from_json(c.config);
    ckpt.meta.objective = c.meta.at("objective").get<std::string>();
    ckpt.meta.seed = c.meta.at("seed").get<uint64_t>();
    ckpt.meta.tokens_trained = c.meta.at("tokens_trained").get<uint64_t>();
    ckpt.meta.optimizer_step = c.meta.at("optimizer_step").get<uint64_t>();
    for (auto it = c.meta.begin(); it != c.meta.end(); ++it) {
        const std::string & k = it.key();
        if (k == "objective" || k == "seed" || k == "tokens_trained" || k == "optimizer_step") continue;
        ckpt.meta.extra[k] = it.value().is_string() ? it.value().get<std::string>() : it.value().dump();
    }
    ckpt.tensors = std::move(c.tensors);
    ckpt.validate();
    return ckpt;
}

} // namespace ltwin

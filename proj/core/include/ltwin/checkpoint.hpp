#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ltwin/tensor.hpp"

namespace ltwin {

enum class AttentionMode { causal, bidirectional };

std::string to_string(AttentionMode m);
AttentionMode attention_mode_from_string(const std::string & s);

struct ModelConfig {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int d_ff = 0;
    int vocab_size = 0;
    int max_seq_len = 0;
    AttentionMode attention_mode = AttentionMode::causal;
    std::optional<int> mask_token_id;
    float rotary_base = 10000.0f;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
};

struct CheckpointMeta {
    std::string objective = "ar"; // "ar" | "mdlm"
    uint64_t seed = 0;
    uint64_t tokens_trained = 0;
    uint64_t optimizer_step = 0;
    // Free-form extras (stream hash, peak lr, ...) carried through the container.
    std::map<std::string, std::string> extra;
};

// Model parameters in canonical declaration order plus metadata. Tensor names
// and shapes are locked to the scheme in canonical_tensor_shapes().
struct Checkpoint {
    ModelConfig config;
    std::vector<std::pair<std::string, TensorF32>> tensors;
    CheckpointMeta meta;

    const TensorF32 & tensor(const std::string & name) const;
    TensorF32 & tensor(const std::string & name);
    bool has_tensor(const std::string & name) const;

    void validate() const;
};

// name -> shape, in canonical declaration order for the given config.
std::vector<std::pair<std::string, std::vector<int64_t>>> canonical_tensor_shapes(const ModelConfig & cfg);

void save_checkpoint(const Checkpoint & ckpt, const std::string & path);
Checkpoint load_checkpoint(const std::string & path);

// Generic "LTWN" container: JSON header (config/meta/tensor directory) plus a
// contiguous f32 payload. Checkpoints and activation-trace dumps share it.
struct Container {
    nlohmann::ordered_json config;
    nlohmann::ordered_json meta;
    std::vector<std::pair<std::string, TensorF32>> tensors;
};

void save_container(const Container & c, const std::string & path);
Container load_container(const std::string & path);

nlohmann::ordered_json model_config_to_json(const ModelConfig & cfg);
ModelConfig model_config_from_json(const nlohmann::ordered_json & j);

// Atomic file write: temp file in the same directory, then rename.
void write_file_atomic(const std::string & path, const void * bytes, size_t len);

} // namespace ltwin

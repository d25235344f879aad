#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ltwin/checkpoint.hpp"
#include "ltwin/corpus.hpp"
#include "ltwin/tensor.hpp"

namespace ltwin {

enum class ProbeKind { residual_post_block, qkv_input };

std::string to_string(ProbeKind k);
ProbeKind probe_kind_from_string(const std::string & s);

// residual_post_block admits layer 0 (embedding output); blocks are 1..T.
// qkv_input exists for layers 1..T only.
struct ProbePoint {
    ProbeKind kind = ProbeKind::residual_post_block;
    int layer = 0;

    bool operator<(const ProbePoint & o) const {
        return kind != o.kind ? kind < o.kind : layer < o.layer;
    }
    bool operator==(const ProbePoint & o) const { return kind == o.kind && layer == o.layer; }
};

enum class InterventionAction { zero };

// Zeroes one residual-stream channel immediately after every block in
// [layer_lo, layer_hi] (and after the embedding when layer_lo == 0).
struct Intervention {
    int channel = 0;
    int layer_lo = 0;
    int layer_hi = 0;
    InterventionAction action = InterventionAction::zero;
};

// Captured hidden states: one row per (sample, copy, position) for every
// captured probe point, with shared row metadata.
struct ActivationTrace {
    int d_model = 0;
    int n_layers = 0;
    int64_t rows = 0;
    std::map<ProbePoint, std::vector<float>> probes; // each rows x d_model

    std::vector<int32_t> sample;    // calibration sequence index
    std::vector<int32_t> copy;      // masked-copy index within the sample
    std::vector<int32_t> position;  // token position
    std::vector<uint8_t> valid;     // false = padding row
    std::vector<uint8_t> corrupted; // position was masked in this copy
    std::vector<float> t;           // mask fraction of the row's copy

    bool has(const ProbePoint & p) const { return probes.count(p) != 0; }
    const float * row(const ProbePoint & p, int64_t r) const { return probes.at(p).data() + r * d_model; }
};

void save_trace(const ActivationTrace & trace, const std::string & path);
ActivationTrace load_trace(const std::string & path);

// Receives every linear layer's input rows during a forward pass; used for
// calibration statistics (feature norms, Hessians). Keys:
//   blocks.{i}.qkv      input of wq/wk/wv      [rows x d_model]
//   blocks.{i}.attn_out input of wo            [rows x d_model]
//   blocks.{i}.mlp_in   input of w_up          [rows x d_model]
//   blocks.{i}.mlp_mid  input of w_down        [rows x d_ff]
class LinearInputSink {
  public:
    virtual ~LinearInputSink() = default;
    virtual void add(const std::string & input_key, const float * rows, int64_t n_rows, int64_t width,
                     const uint8_t * valid) = 0;
};

struct ForwardHooks {
    std::vector<ProbePoint> captures;
    std::vector<Intervention> interventions;
    ActivationTrace * trace = nullptr;
    int32_t sample_index = 0;
    int32_t copy_index = 0;
    float t = 0.0f;
    const std::vector<uint8_t> * corrupted = nullptr; // parallel to the input sequence
    int64_t position_offset = 0;                      // shifts rotary positions (testing)
    LinearInputSink * linear_sink = nullptr;
};

// Fresh parameters: Normal(0, 0.02^2) truncated at +-3 sigma, norm gains 1.
Checkpoint init_params(const ModelConfig & config, uint64_t seed);

// Pre-LN rotary transformer forward over one sequence. Returns logits [L x V].
TensorF32 forward(const Checkpoint & ckpt, const TokenSequence & tokens, const ForwardHooks & hooks = {});

double gelu_tanh(double x);

// Rotary position rotation of one head_dim-wide vector at a given position;
// attention scores depend only on relative positions through this map.
void rotary_apply(float * head_vec, int head_dim, int64_t position, float base);

// ---- Batched core shared by the trainer, evaluator, and capture paths ----

struct BatchView {
    int64_t batch = 0;
    int64_t seq_len = 0;
    const int32_t * tokens = nullptr; // [batch x seq_len]
    const uint8_t * valid = nullptr;  // [batch x seq_len]
};

// Saved forward state for reverse mode, one entry per block.
struct BlockTape {
    std::vector<float> x_in, y1, q, k, v, attn, x_mid, y2, u;
    std::vector<float> probs; // [batch x heads x L x L]
    std::vector<double> inv_rms1, inv_rms2;
};

struct Tape {
    int64_t batch = 0, seq_len = 0, rows = 0;
    std::vector<int32_t> tokens;
    std::vector<uint8_t> valid;
    std::vector<BlockTape> blocks;
    std::vector<float> x_final, y_final;
    std::vector<double> inv_rms_final;
};

// Logits for a whole batch; fills tape when given (training path). Hooks are
// for capture/intervention; tape and hooks may be combined.
void forward_batch(const Checkpoint & ckpt, const BatchView & batch, std::vector<float> & logits,
                   Tape * tape = nullptr, const ForwardHooks * hooks = nullptr);

// Reverse mode from d(loss)/d(logits); returns gradients for every parameter
// tensor in canonical order.
std::vector<std::pair<std::string, TensorF32>> backward_from_dlogits(const Checkpoint & ckpt, const Tape & tape,
                                                                     const std::vector<float> & dlogits);

// Runs the calibration protocol over sequences x masked copies and gathers
// the requested probe points.
ActivationTrace capture_trace(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration,
                              const MaskingConfig & masking, const std::vector<ProbePoint> & captures,
                              const std::vector<Intervention> & interventions = {},
                              const std::vector<double> * forced_t = nullptr);

} // namespace ltwin

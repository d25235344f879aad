#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ltwin/checkpoint.hpp"
#include "ltwin/corpus.hpp"
#include "ltwin/model.hpp"
#include "ltwin/rng.hpp"

namespace ltwin {

struct TrainConfig {
    std::string objective = "ar"; // "ar" | "mdlm"
    double peak_lr = 3e-4;
    int64_t total_steps = 0;
    double warmup_frac = 0.01;
    double decay_frac = 0.10;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double grad_clip = 1.0;
    int64_t batch_tokens = 4096;
    uint64_t seed = 0;
    double t_min = 1e-3; // mdlm corruption floor

    void validate() const;
};

inline constexpr double kAdamEps = 1e-8;

struct OptimizerState {
    std::vector<std::pair<std::string, TensorF32>> m, v;
    int64_t step = 0;
};

// Mean cross-entropy over valid positions; per-position losses returned for
// diagnostics (invalid positions hold 0).
struct ArLoss {
    double loss = 0.0;
    std::vector<double> per_position;
};
ArLoss ar_loss(const TensorF32 & logits, const std::vector<int32_t> & targets, const std::vector<uint8_t> & valid);

// Importance-weighted CE at corrupted positions: (1/t) * sum(CE) / n_valid,
// where n_valid counts the sequence's maskable (non-PAD, non-BOS) positions.
double mdlm_loss(const TensorF32 & logits, const std::vector<int32_t> & targets,
                 const std::vector<uint8_t> & corrupted, const std::vector<uint8_t> & valid, double t,
                 double t_min = 1e-3);

// Warm up-Stable-Decay: linear 0->peak over ceil(warmup_frac*total) steps,
// flat at peak, then linear peak->0 over the final ceil(decay_frac*total).
double wsd_lr(int64_t step, const TrainConfig & cfg);

// One microbatch of sequences prepared for a training step.
struct TrainBatch {
    int64_t batch = 0, seq_len = 0;
    std::vector<int32_t> tokens;    // model input (corrupted for mdlm)
    std::vector<int32_t> targets;   // original ids (mdlm) or shifted ids (ar)
    std::vector<uint8_t> valid;     // non-padding input flags
    std::vector<uint8_t> loss_mask; // positions entering the loss
    std::vector<double> t;          // per-sequence mask fraction (mdlm)
    std::vector<int64_t> n_maskable; // per-sequence valid-position counts (mdlm)
};

// Builds the objective view of a raw batch; corruption drawn from mask_rng.
TrainBatch prepare_batch(const TokenBatch & raw, const std::string & objective, double t_min, Rng & mask_rng,
                         int32_t mask_id);

struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0; // pre-clip global norm
};

// Forward + loss + exact reverse mode for one prepared batch.
std::vector<std::pair<std::string, TensorF32>> backward(const Checkpoint & ckpt, const TrainBatch & batch,
                                                        double * loss_out = nullptr);

// Loss only (no tape); shares the forward path with backward.
double objective_loss(const Checkpoint & ckpt, const TrainBatch & batch);

// Global-norm clip, bias-corrected Adam, decoupled weight decay (norm gains
// exempt). Returns the pre-clip gradient norm.
double adamw_step(Checkpoint & params, const std::vector<std::pair<std::string, TensorF32>> & grads,
                  OptimizerState & state, double lr, const TrainConfig & cfg);

struct TrainLogRow {
    int64_t step;
    double lr;
    double loss;
    int64_t tokens_seen;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainLogRow> log;
    uint64_t stream_hash = 0;
};

using StepCallback = std::function<void(const TrainLogRow &)>;

// Trains one model from the given init over the corpus batch stream.
TrainResult train_single(const ModelConfig & model_cfg, const TrainConfig & cfg,
                         const std::vector<std::string> & corpus, int64_t seq_len, uint64_t init_seed,
                         const StepCallback & on_step = nullptr);

struct TwinResult {
    TrainResult ar;
    TrainResult mdlm;
};

// The controlled-twin protocol: identical init seed, identical batch stream
// (verified by hash), identical step counts; only the objective differs.
TwinResult train_twins(const ModelConfig & base_cfg, const TrainConfig & shared_cfg,
                       const std::vector<std::string> & corpus, int64_t seq_len, uint64_t init_seed,
                       const StepCallback & on_step = nullptr);

void write_loss_log_csv(const std::vector<TrainLogRow> & log, const std::string & path);

} // namespace ltwin

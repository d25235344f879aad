#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ltwin/checkpoint.hpp"
#include "ltwin/corpus.hpp"
#include "ltwin/tensor.hpp"

namespace ltwin {

enum class ScheduleMode { uniform, eis, dis };

std::string to_string(ScheduleMode m);
ScheduleMode schedule_mode_from_string(const std::string & s);

struct SparsitySchedule {
    ScheduleMode mode = ScheduleMode::uniform;
    double s = 0.0;
    double epsilon = 0.08;
    std::vector<double> per_layer; // length T
};

// uniform -> all s; eis -> s + eps*(1 - 2(t-1)/(T-1)); dis mirrors eis.
SparsitySchedule sparsity_schedule(int n_layers, double s, double epsilon, ScheduleMode mode);

// Per-input-feature L2 norms over all calibration tokens, for every linear
// layer input in the model (keyed by weight tensor name).
struct FeatureNorms {
    std::map<std::string, std::vector<double>> norms;
};

FeatureNorms collect_feature_norms(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration);

struct PruneResult {
    TensorF32 weight;
    std::vector<uint8_t> keep_mask; // parallel to weight.data
};

// WANDA: score |W_ij| * norm_j, zero the floor(sparsity*in) lowest-scored
// entries per output row; ties by lower score then lower column index.
PruneResult wanda_prune(const TensorF32 & weight, const std::vector<double> & norms, double sparsity);

// Applies the schedule to all six projection matrices per block.
struct PruneReport {
    std::vector<double> layer_sparsity;
    std::vector<int64_t> zeros_per_layer;
};
Checkpoint prune_model(const Checkpoint & ckpt, const SparsitySchedule & schedule,
                       const std::vector<TokenSequence> & calibration, PruneReport * report = nullptr);

enum class ColumnOrder { natural, activation };

struct QuantConfig {
    int bits = 4;               // {2,3,4,8,16}; 16 = pass-through
    int64_t group_size = 64;    // or whole-row when <= 0
    double damping = 0.01;      // fraction of mean(diag H)
    ColumnOrder order = ColumnOrder::natural;

    void validate(int64_t row_width) const;
};

struct QuantizedGroup {
    double scale = 1.0;
    int64_t zero_point = 0;
    std::vector<int64_t> q;
    std::vector<float> dequant;
};

// Asymmetric min-max grid over one group of values.
QuantizedGroup quantize_grid(const std::vector<float> & group, int bits);

// GPTQ: sequential column quantization with error feedback through the
// Cholesky factor of the inverse calibration Hessian.
TensorF32 gptq_quantize(const TensorF32 & weight, const std::vector<std::vector<float>> & calib_inputs,
                        const QuantConfig & cfg);

// Round-to-nearest baseline with the same grid policy (no error feedback).
TensorF32 rtn_quantize(const TensorF32 & weight, const QuantConfig & cfg);

struct QuantLayerReport {
    std::string name;
    double gptq_error = 0.0; // ||X W^T - X What^T||_F over the calibration inputs
    double rtn_error = 0.0;
};

// Quantizes all six projection matrices per block; embedding/lm_head untouched.
Checkpoint quantize_model(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration,
                          const QuantConfig & cfg, std::vector<QuantLayerReport> * report = nullptr);

// Calibration Hessian H = X^T X per linear layer (f64, keyed by weight name).
struct LayerHessians {
    std::map<std::string, std::vector<double>> h; // [in x in]
    std::map<std::string, int64_t> width;
    int64_t tokens = 0;
};
LayerHessians collect_hessians(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration);

// GPTQ core on a precomputed Hessian; gptq_quantize wraps it.
TensorF32 gptq_from_hessian(const TensorF32 & weight, const std::vector<double> & hessian,
                            const QuantConfig & cfg);

// The sink key feeding a given projection weight (wq/wk/wv share their input).
std::string input_key_for_weight(const std::string & weight_name);

} // namespace ltwin

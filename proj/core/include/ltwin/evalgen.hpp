#pragma once

#include <string>
#include <vector>

#include "ltwin/checkpoint.hpp"
#include "ltwin/corpus.hpp"
#include "ltwin/model.hpp"

namespace ltwin {

struct EvalResult {
    double loss = 0.0;
    double perplexity = 0.0;
    int64_t token_count = 0;
    std::string objective;
    std::vector<Intervention> interventions;
};

// AR: pooled next-token CE over the held-out set. MDLM: Monte Carlo mean of
// the importance-weighted loss over mc_samples stratified mask fractions
// t = (s + 0.5) / mc_samples per sequence.
EvalResult eval_perplexity(const Checkpoint & ckpt, const std::vector<TokenSequence> & heldout,
                           int mc_samples = 8, const std::vector<Intervention> & interventions = {},
                           uint64_t seed = 0, double t_min = 1e-3);

// Greedy continuation; requires a causal checkpoint.
TokenSequence generate_ar(const Checkpoint & ckpt, const TokenSequence & prompt, int64_t max_new,
                          const std::vector<Intervention> & interventions = {});

struct DiffusionDecodeConfig {
    int64_t gen_length = 64;
    int64_t block_length = 32;
    int64_t tokens_per_step = 1;
    int64_t max_steps = 1 << 20;

    void validate() const;
};

// Semi-autoregressive low-confidence-remasking decoder: blocks left to right;
// each step commits the tokens_per_step most confident still-masked positions
// of the current block (ceil(B/k) steps per block).
TokenSequence generate_diffusion(const Checkpoint & ckpt, const TokenSequence & prompt,
                                 const DiffusionDecodeConfig & cfg,
                                 const std::vector<Intervention> & interventions = {});

struct CommitChoice {
    int64_t position; // absolute position in the sequence
    int32_t token;
    double confidence;
};

// Pure selection rule used by generate_diffusion: for still-masked positions
// (given their logits rows), pick the k most confident argmax commitments.
// Ties break toward the lower position.
std::vector<CommitChoice> select_commits(const std::vector<int64_t> & masked_positions,
                                         const std::vector<const float *> & logit_rows, int64_t vocab, int64_t k);

// Escapes bytes outside printable ASCII as \xNN for terminal-safe output.
std::string escape_bytes(const std::string & raw);

nlohmann::ordered_json eval_result_to_json(const EvalResult & r);

} // namespace ltwin

#include "ltwin/evalgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ltwin/rng.hpp"
#include "ltwin/train.hpp"

namespace ltwin {

EvalResult eval_perplexity(const Checkpoint & ckpt, const std::vector<TokenSequence> & heldout, int mc_samples,
                           const std::vector<Intervention> & interventions, uint64_t seed, double t_min) {
    if (heldout.empty()) fail(ErrorKind::insufficient_data, "eval_perplexity: empty held-out set");
    EvalResult res;
    res.objective = ckpt.meta.objective;
    res.interventions = interventions;

    ForwardHooks hooks;
    hooks.interventions = interventions;

    if (ckpt.meta.objective == "ar") {
        double ce_sum = 0.0;
        int64_t count = 0;
        for (const auto & seq : heldout) {
            const TensorF32 logits = forward(ckpt, seq, hooks);
            const int64_t L = logits.shape[0];
            std::vector<int32_t> targets(static_cast<size_t>(L), kPadId);
            std::vector<uint8_t> valid(static_cast<size_t>(L), 0);
            for (int64_t i = 0; i + 1 < L; ++i) {
                const int32_t next = seq.ids[static_cast<size_t>(i + 1)];
                targets[static_cast<size_t>(i)] = next;
                valid[static_cast<size_t>(i)] = seq.valid[static_cast<size_t>(i)] &&
                                                seq.valid[static_cast<size_t>(i + 1)] && next != kBosId &&
                                                next != kPadId;
            }
            bool any = false;
            for (uint8_t v : valid) any |= v != 0;
            if (!any) continue;
            const ArLoss al = ar_loss(logits, targets, valid);
            for (int64_t i = 0; i < L; ++i) {
                if (!valid[static_cast<size_t>(i)]) continue;
                ce_sum += al.per_position[static_cast<size_t>(i)];
                ++count;
            }
        }
        if (count == 0) fail(ErrorKind::insufficient_data, "eval_perplexity: no scorable positions");
        res.loss = ce_sum / static_cast<double>(count);
        res.token_count = count;
    } else {
        if (mc_samples < 1) fail(ErrorKind::validation, "mc_samples must be >= 1");
        double loss_sum = 0.0;
        int64_t n_terms = 0;
        int64_t tokens = 0;
        for (size_t si = 0; si < heldout.size(); ++si) {
            const TokenSequence & seq = heldout[si];
            for (uint8_t v : seq.valid) tokens += v ? 1 : 0;
            for (int s = 0; s < mc_samples; ++s) {
                const double t = std::max(t_min, (static_cast<double>(s) + 0.5) / static_cast<double>(mc_samples));
                const MaskedCopy mc = apply_masking(seq, t, *ckpt.config.mask_token_id,
                                                    derive_seed(seed, si * 1000003ULL + static_cast<uint64_t>(s)));
                const TensorF32 logits = forward(ckpt, mc.seq, hooks);
                loss_sum += mdlm_loss(logits, seq.ids, mc.corrupted, seq.valid, t, t_min);
                ++n_terms;
            }
        }
        res.loss = loss_sum / static_cast<double>(n_terms);
        res.token_count = tokens;
    }
    res.perplexity = std::exp(res.loss);
    return res;
}

TokenSequence generate_ar(const Checkpoint & ckpt, const TokenSequence & prompt, int64_t max_new,
                          const std::vector<Intervention> & interventions) {
    if (ckpt.config.attention_mode != AttentionMode::causal)
        fail(ErrorKind::mode, "generate_ar requires a causal checkpoint");
    TokenSequence seq = prompt;
    ForwardHooks hooks;
    hooks.interventions = interventions;
    for (int64_t step = 0; step < max_new; ++step) {
        if (static_cast<int>(seq.ids.size()) >= ckpt.config.max_seq_len) break;
        const TensorF32 logits = forward(ckpt, seq, hooks);
        const int64_t L = logits.shape[0];
        const int64_t V = logits.shape[1];
        const float * row = logits.data.data() + (L - 1) * V;
        int32_t best = 0;
        for (int64_t j = 1; j < V; ++j)
            if (row[j] > row[best]) best = static_cast<int32_t>(j);
        seq.ids.push_back(best);
        seq.valid.push_back(1);
    }
    return seq;
}

void DiffusionDecodeConfig::validate() const {
    if (gen_length < 0 || block_length <= 0 || tokens_per_step < 1)
        fail(ErrorKind::validation, "diffusion decode extents must be positive");
    if (gen_length % block_length != 0)
        fail(ErrorKind::validation, "block_length must divide gen_length");
    if (max_steps < 1) fail(ErrorKind::validation, "max_steps must be positive");
}

std::vector<CommitChoice> select_commits(const std::vector<int64_t> & masked_positions,
                                         const std::vector<const float *> & logit_rows, int64_t vocab, int64_t k) {
    if (masked_positions.size() != logit_rows.size())
        fail(ErrorKind::dimension, "select_commits: positions/logits mismatch");
    std::vector<CommitChoice> all;
    all.reserve(masked_positions.size());
    for (size_t i = 0; i < masked_positions.size(); ++i) {
        const float * row = logit_rows[i];
        int64_t best = 0;
        double mx = static_cast<double>(row[0]);
        for (int64_t j = 1; j < vocab; ++j)
            if (static_cast<double>(row[j]) > mx) {
                mx = static_cast<double>(row[j]);
                best = j;
            }
        double z = 0.0;
        for (int64_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        all.push_back({masked_positions[i], static_cast<int32_t>(best), 1.0 / z});
    }
    std::stable_sort(all.begin(), all.end(), [](const CommitChoice & a, const CommitChoice & b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.position < b.position;
    });
    if (static_cast<int64_t>(all.size()) > k) all.resize(static_cast<size_t>(k));
    return all;
}

TokenSequence generate_diffusion(const Checkpoint & ckpt, const TokenSequence & prompt,
                                 const DiffusionDecodeConfig & cfg,
                                 const std::vector<Intervention> & interventions) {
    cfg.validate();
    if (ckpt.config.attention_mode != AttentionMode::bidirectional || !ckpt.config.mask_token_id)
        fail(ErrorKind::mode, "generate_diffusion requires a bidirectional checkpoint with a mask token");
    const int32_t mask_id = *ckpt.config.mask_token_id;

    TokenSequence seq = prompt;
    const int64_t prompt_len = static_cast<int64_t>(seq.ids.size());
    for (int64_t i = 0; i < cfg.gen_length; ++i) {
        seq.ids.push_back(mask_id);
        seq.valid.push_back(1);
    }
    if (static_cast<int>(seq.ids.size()) > ckpt.config.max_seq_len)
        fail(ErrorKind::validation, "generation exceeds max_seq_len");

    ForwardHooks hooks;
    hooks.interventions = interventions;
    const int64_t V = ckpt.config.vocab_size;
    int64_t steps = 0;

    for (int64_t blk = 0; blk < cfg.gen_length / cfg.block_length; ++blk) {
        const int64_t lo = prompt_len + blk * cfg.block_length;
        const int64_t hi = lo + cfg.block_length;
        while (true) {
            std::vector<int64_t> masked;
            for (int64_t p = lo; p < hi; ++p)
                if (seq.ids[static_cast<size_t>(p)] == mask_id) masked.push_back(p);
            if (masked.empty()) break;
            if (++steps > cfg.max_steps) fail(ErrorKind::validation, "diffusion decode exceeded max_steps");

            const TensorF32 logits = forward(ckpt, seq, hooks);
            std::vector<const float *> rows;
            rows.reserve(masked.size());
            for (int64_t p : masked) rows.push_back(logits.data.data() + p * V);
            const auto commits = select_commits(masked, rows, V, cfg.tokens_per_step);
            for (const auto & c : commits) seq.ids[static_cast<size_t>(c.position)] = c.token;
        }
    }
    return seq;
}

std::string escape_bytes(const std::string & raw) {
    std::string out;
    out.reserve(raw.size());
    char buf[8];
    for (unsigned char c : raw) {
        if (c == '\n' || c == '\t' || (c >= 0x20 && c < 0x7f)) {
            out.push_back(static_cast<char>(c));
        } else {
            std::snprintf(buf, sizeof(buf), "\\x%02X", c);
            out += buf;
        }
    }
    return out;
}

nlohmann::ordered_json eval_result_to_json(const EvalResult & r) {
    nlohmann::ordered_json j;
    j["loss"] = r.loss;
    j["perplexity"] = r.perplexity;
    j["token_count"] = r.token_count;
    j["objective"] = r.objective;
    nlohmann::ordered_json ivs = nlohmann::ordered_json::array();
    for (const auto & iv : r.interventions)
        ivs.push_back({{"channel", iv.channel}, {"layer_lo", iv.layer_lo}, {"layer_hi", iv.layer_hi},
                       {"action", "zero"}});
    j["interventions"] = ivs;
    return j;
}

} // namespace ltwin

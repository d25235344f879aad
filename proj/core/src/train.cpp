#include "ltwin/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "ltwin/rng.hpp"

namespace ltwin {

void TrainConfig::validate() const {
    if (objective != "ar" && objective != "mdlm") fail(ErrorKind::validation, "objective must be ar or mdlm");
    if (!(peak_lr > 0.0)) fail(ErrorKind::validation, "peak_lr must be positive");
    if (total_steps < 0) fail(ErrorKind::validation, "total_steps must be >= 0");
    if (warmup_frac < 0.0 || decay_frac < 0.0 || warmup_frac + decay_frac > 1.0)
        fail(ErrorKind::validation, "warmup_frac + decay_frac must not exceed 1");
    if (!(grad_clip > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        fail(ErrorKind::validation, "invalid optimizer constants");
    if (weight_decay < 0.0) fail(ErrorKind::validation, "weight_decay must be >= 0");
    if (batch_tokens <= 0) fail(ErrorKind::validation, "batch_tokens must be positive");
    if (!(t_min > 0.0 && t_min < 1.0)) fail(ErrorKind::validation, "t_min must lie in (0,1)");
}

namespace {

// log-sum-exp and CE of one logits row, f64 with max subtraction
double row_ce(const float * row, int64_t v, int32_t target) {
    double mx = -1e300;
    for (int64_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    return mx + std::log(z) - static_cast<double>(row[target]);
}

void row_softmax(const float * row, int64_t v, double * out) {
    double mx = -1e300;
    for (int64_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) {
        out[j] = std::exp(static_cast<double>(row[j]) - mx);
        z += out[j];
    }
    const double invz = 1.0 / z;
    for (int64_t j = 0; j < v; ++j) out[j] *= invz;
}

} // namespace

ArLoss ar_loss(const TensorF32 & logits, const std::vector<int32_t> & targets, const std::vector<uint8_t> & valid) {
    if (logits.rank() != 2) fail(ErrorKind::dimension, "ar_loss expects [L x V] logits");
    const int64_t L = logits.shape[0];
    const int64_t V = logits.shape[1];
    if (static_cast<int64_t>(targets.size()) != L || static_cast<int64_t>(valid.size()) != L)
        fail(ErrorKind::dimension, "ar_loss targets/valid length mismatch");

    ArLoss out;
    out.per_position.assign(static_cast<size_t>(L), 0.0);
    double total = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < L; ++i) {
        if (!valid[static_cast<size_t>(i)]) continue;
        const int32_t tgt = targets[static_cast<size_t>(i)];
        if (tgt < 0 || tgt >= V) fail(ErrorKind::validation, "ar_loss target id out of range");
        const double ce = row_ce(logits.data.data() + i * V, V, tgt);
        out.per_position[static_cast<size_t>(i)] = ce;
        total += ce;
        ++count;
    }
    if (count == 0) fail(ErrorKind::validation, "ar_loss: no valid positions");
    out.loss = total / static_cast<double>(count);
    return out;
}

double mdlm_loss(const TensorF32 & logits, const std::vector<int32_t> & targets,
                 const std::vector<uint8_t> & corrupted, const std::vector<uint8_t> & valid, double t,
                 double t_min) {
    if (logits.rank() != 2) fail(ErrorKind::dimension, "mdlm_loss expects [L x V] logits");
    const int64_t L = logits.shape[0];
    const int64_t V = logits.shape[1];
    if (static_cast<int64_t>(targets.size()) != L || static_cast<int64_t>(corrupted.size()) != L ||
        static_cast<int64_t>(valid.size()) != L)
        fail(ErrorKind::dimension, "mdlm_loss input length mismatch");
    if (t < t_min) fail(ErrorKind::validation, "mdlm_loss: t below t_min");
    if (t > 1.0) fail(ErrorKind::validation, "mdlm_loss: t above 1");

    int64_t n_maskable = 0;
    double ce_sum = 0.0;
    for (int64_t i = 0; i < L; ++i) {
        if (!valid[static_cast<size_t>(i)]) continue;
        const int32_t tgt = targets[static_cast<size_t>(i)];
        if (tgt == kBosId || tgt == kPadId) continue;
        ++n_maskable;
        if (corrupted[static_cast<size_t>(i)]) ce_sum += row_ce(logits.data.data() + i * V, V, tgt);
    }
    if (n_maskable == 0) return 0.0;
    return ce_sum / (t * static_cast<double>(n_maskable));
}

double wsd_lr(int64_t step, const TrainConfig & cfg) {
    if (step < 0 || step > cfg.total_steps) fail(ErrorKind::validation, "wsd_lr step out of range");
    if (cfg.total_steps == 0) return 0.0;
    const int64_t warmup = static_cast<int64_t>(std::ceil(cfg.warmup_frac * static_cast<double>(cfg.total_steps)));
    const int64_t decay = static_cast<int64_t>(std::ceil(cfg.decay_frac * static_cast<double>(cfg.total_steps)));
    const int64_t decay_start = cfg.total_steps - decay;
    if (warmup > 0 && step < warmup) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (step <= decay_start || decay == 0) return cfg.peak_lr;
    return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) / static_cast<double>(decay);
}

TrainBatch prepare_batch(const TokenBatch & raw, const std::string & objective, double t_min, Rng & mask_rng,
                         int32_t mask_id) {
    TrainBatch b;
    b.batch = raw.batch_size;
    b.seq_len = raw.seq_len;
    const int64_t B = b.batch;
    const int64_t L = b.seq_len;
    b.tokens = raw.tokens;
    b.valid = raw.valid;
    b.targets.assign(static_cast<size_t>(B * L), kPadId);
    b.loss_mask.assign(static_cast<size_t>(B * L), 0);

    if (objective == "ar") {
        for (int64_t r = 0; r < B; ++r) {
            for (int64_t i = 0; i < L - 1; ++i) {
                const int64_t p = r * L + i;
                const int32_t next = raw.tokens[static_cast<size_t>(p + 1)];
                b.targets[static_cast<size_t>(p)] = next;
                // next-token CE over valid pairs; BOS separators are not predicted
                if (raw.valid[static_cast<size_t>(p)] && raw.valid[static_cast<size_t>(p + 1)] && next != kBosId &&
                    next != kPadId)
                    b.loss_mask[static_cast<size_t>(p)] = 1;
            }
        }
    } else {
        b.t.resize(static_cast<size_t>(B));
        b.n_maskable.resize(static_cast<size_t>(B));
        for (int64_t r = 0; r < B; ++r) {
            const double t = t_min + (1.0 - t_min) * mask_rng.uniform01();
            b.t[static_cast<size_t>(r)] = t;
            int64_t maskable = 0;
            for (int64_t i = 0; i < L; ++i) {
                const int64_t p = r * L + i;
                const int32_t id = raw.tokens[static_cast<size_t>(p)];
                b.targets[static_cast<size_t>(p)] = id;
                if (!raw.valid[static_cast<size_t>(p)] || id == kBosId || id == kPadId) continue;
                ++maskable;
                if (mask_rng.uniform01() < t) {
                    b.tokens[static_cast<size_t>(p)] = mask_id;
                    b.loss_mask[static_cast<size_t>(p)] = 1;
                }
            }
            b.n_maskable[static_cast<size_t>(r)] = maskable;
        }
    }
    return b;
}

namespace {

// Pooled batch loss and (optionally) d(loss)/d(logits).
double batch_loss_and_dlogits(const std::vector<float> & logits, const TrainBatch & batch, int64_t V,
                              const std::string & objective, std::vector<float> * dlogits) {
    const int64_t B = batch.batch;
    const int64_t L = batch.seq_len;
    const int64_t N = B * L;
    if (dlogits) dlogits->assign(static_cast<size_t>(N * V), 0.0f);

    double loss = 0.0;
    std::vector<double> sm(static_cast<size_t>(V));

    if (objective == "ar") {
        int64_t count = 0;
        for (int64_t p = 0; p < N; ++p) count += batch.loss_mask[static_cast<size_t>(p)] ? 1 : 0;
        if (count == 0) fail(ErrorKind::validation, "ar batch has no loss positions");
        const double wgt = 1.0 / static_cast<double>(count);
        for (int64_t p = 0; p < N; ++p) {
            if (!batch.loss_mask[static_cast<size_t>(p)]) continue;
            const float * row = logits.data() + p * V;
            const int32_t tgt = batch.targets[static_cast<size_t>(p)];
            loss += row_ce(row, V, tgt) * wgt;
            if (dlogits) {
                row_softmax(row, V, sm.data());
                float * drow = dlogits->data() + p * V;
                for (int64_t j = 0; j < V; ++j) drow[j] = static_cast<float>(sm[static_cast<size_t>(j)] * wgt);
                drow[tgt] = static_cast<float>((sm[static_cast<size_t>(tgt)] - 1.0) * wgt);
            }
        }
    } else {
        for (int64_t r = 0; r < B; ++r) {
            const int64_t maskable = batch.n_maskable[static_cast<size_t>(r)];
            if (maskable == 0) continue;
            const double w = 1.0 / (batch.t[static_cast<size_t>(r)] * static_cast<double>(maskable) *
                                    static_cast<double>(B));
            for (int64_t i = 0; i < L; ++i) {
                const int64_t p = r * L + i;
                if (!batch.loss_mask[static_cast<size_t>(p)]) continue;
                const float * row = logits.data() + p * V;
                const int32_t tgt = batch.targets[static_cast<size_t>(p)];
                loss += row_ce(row, V, tgt) * w;
                if (dlogits) {
                    row_softmax(row, V, sm.data());
                    float * drow = dlogits->data() + p * V;
                    for (int64_t j = 0; j < V; ++j) drow[j] = static_cast<float>(sm[static_cast<size_t>(j)] * w);
                    drow[tgt] = static_cast<float>((sm[static_cast<size_t>(tgt)] - 1.0) * w);
                }
            }
        }
    }
    return loss;
}

} // namespace

std::vector<std::pair<std::string, TensorF32>> backward(const Checkpoint & ckpt, const TrainBatch & batch,
                                                        double * loss_out) {
    BatchView view{batch.batch, batch.seq_len, batch.tokens.data(), batch.valid.data()};
    std::vector<float> logits;
    Tape tape;
    forward_batch(ckpt, view, logits, &tape, nullptr);

    std::vector<float> dlogits;
    const double loss =
        batch_loss_and_dlogits(logits, batch, ckpt.config.vocab_size, ckpt.meta.objective, &dlogits);
    if (!std::isfinite(loss)) fail(ErrorKind::numeric, "non-finite loss in backward");
    if (loss_out) *loss_out = loss;
    return backward_from_dlogits(ckpt, tape, dlogits);
}

double objective_loss(const Checkpoint & ckpt, const TrainBatch & batch) {
    BatchView view{batch.batch, batch.seq_len, batch.tokens.data(), batch.valid.data()};
    std::vector<float> logits;
    forward_batch(ckpt, view, logits, nullptr, nullptr);
    return batch_loss_and_dlogits(logits, batch, ckpt.config.vocab_size, ckpt.meta.objective, nullptr);
}

double adamw_step(Checkpoint & params, const std::vector<std::pair<std::string, TensorF32>> & grads,
                  OptimizerState & state, double lr, const TrainConfig & cfg) {
    if (state.m.empty()) {
        for (const auto & [name, t] : grads) {
            state.m.emplace_back(name, TensorF32(t.shape));
            state.v.emplace_back(name, TensorF32(t.shape));
        }
    }
    if (state.m.size() != grads.size())
        fail(ErrorKind::validation, "optimizer state does not match gradient map");

    double sq = 0.0;
    for (const auto & [name, g] : grads)
        for (float v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
    const double gnorm = std::sqrt(sq);
    const double scale = gnorm > cfg.grad_clip ? cfg.grad_clip / gnorm : 1.0;

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    for (size_t ti = 0; ti < grads.size(); ++ti) {
        const auto & [name, g] = grads[ti];
        TensorF32 & p = params.tensor(name);
        TensorF32 & m = state.m[ti].second;
        TensorF32 & v = state.v[ti].second;
        if (p.shape != g.shape) fail(ErrorKind::dimension, "gradient shape mismatch for " + name);
        const bool is_gain = name.size() >= 4 && name.compare(name.size() - 4, 4, "gain") == 0;
        const double wd = is_gain ? 0.0 : cfg.weight_decay;
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]) * scale;
            const double mi = cfg.beta1 * static_cast<double>(m.data[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v.data[i]) + (1.0 - cfg.beta2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            double pi = static_cast<double>(p.data[i]) - lr * mhat / (std::sqrt(vhat) + kAdamEps);
            pi -= lr * wd * pi;
            p.data[i] = static_cast<float>(pi);
        }
    }
    return gnorm;
}

TrainResult train_single(const ModelConfig & model_cfg, const TrainConfig & cfg,
                         const std::vector<std::string> & corpus, int64_t seq_len, uint64_t init_seed,
                         const StepCallback & on_step) {
    cfg.validate();
    ModelConfig mc = model_cfg;
    if (cfg.objective == "ar") {
        mc.attention_mode = AttentionMode::causal;
        mc.mask_token_id.reset();
    } else {
        mc.attention_mode = AttentionMode::bidirectional;
        mc.mask_token_id = kMaskId;
    }

    Checkpoint ckpt = init_params(mc, init_seed);
    ckpt.meta.objective = cfg.objective;

    const int64_t batch_size = std::max<int64_t>(1, cfg.batch_tokens / seq_len);
    BatchStream stream(corpus, seq_len, batch_size, cfg.seed);
    Rng mask_rng(derive_seed(cfg.seed, 0x6d61736bULL)); // mdlm corruption stream

    OptimizerState opt;
    TrainResult result;
    for (int64_t step = 1; step <= cfg.total_steps; ++step) {
        const TokenBatch raw = stream.next();
        const TrainBatch batch = prepare_batch(raw, cfg.objective, cfg.t_min, mask_rng, kMaskId);

        double loss = 0.0;
        auto grads = backward(ckpt, batch, &loss);
        if (!std::isfinite(loss) || loss > 1e4)
            fail(ErrorKind::numeric, "training diverged at step " + std::to_string(step) + " (loss " +
                                         std::to_string(loss) + ", objective " + cfg.objective + ")");
        const double lr = wsd_lr(step, cfg);
        adamw_step(ckpt, grads, opt, lr, cfg);

        TrainLogRow row{step, lr, loss, step * batch_size * seq_len};
        result.log.push_back(row);
        if (on_step) on_step(row);
    }

    result.stream_hash = stream.stream_hash();
    ckpt.meta.seed = init_seed;
    ckpt.meta.tokens_trained = static_cast<uint64_t>(cfg.total_steps * batch_size * seq_len);
    ckpt.meta.optimizer_step = static_cast<uint64_t>(opt.step);
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(result.stream_hash));
        ckpt.meta.extra["stream_hash"] = buf;
        std::snprintf(buf, sizeof(buf), "%.9g", cfg.peak_lr);
        ckpt.meta.extra["peak_lr"] = buf;
    }
    result.checkpoint = std::move(ckpt);
    return result;
}

TwinResult train_twins(const ModelConfig & base_cfg, const TrainConfig & shared_cfg,
                       const std::vector<std::string> & corpus, int64_t seq_len, uint64_t init_seed,
                       const StepCallback & on_step) {
    TwinResult result;
    TrainConfig ar_cfg = shared_cfg;
    ar_cfg.objective = "ar";
    TrainConfig mdlm_cfg = shared_cfg;
    mdlm_cfg.objective = "mdlm";

    result.ar = train_single(base_cfg, ar_cfg, corpus, seq_len, init_seed, on_step);
    result.mdlm = train_single(base_cfg, mdlm_cfg, corpus, seq_len, init_seed, on_step);

    if (shared_cfg.total_steps > 0 && result.ar.stream_hash != result.mdlm.stream_hash)
        fail(ErrorKind::validation, "twin batch streams diverged (hash mismatch)");
    return result;
}

void write_loss_log_csv(const std::vector<TrainLogRow> & log, const std::string & path) {
    std::string csv = "step,lr,loss,tokens_seen\n";
    char buf[128];
    for (const auto & row : log) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%lld\n", static_cast<long long>(row.step), row.lr,
                      row.loss, static_cast<long long>(row.tokens_seen));
        csv += buf;
    }
    write_file_atomic(path, csv.data(), csv.size());
}

} // namespace ltwin

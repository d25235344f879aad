#include <benchmark/benchmark.h>

#include "ltwin/corpus.hpp"
#include "ltwin/model.hpp"
#include "ltwin/rng.hpp"
#include "ltwin/train.hpp"

using namespace ltwin;

namespace {

ModelConfig desk_config() {
    ModelConfig cfg;
    cfg.n_layers = 8;
    cfg.d_model = 256;
    cfg.n_heads = 8;
    cfg.d_ff = 1024;
    cfg.vocab_size = kVocabSize;
    cfg.max_seq_len = 512;
    cfg.attention_mode = AttentionMode::causal;
    return cfg;
}

TokenBatch random_batch(int64_t batch, int64_t seq_len, uint64_t seed) {
    TokenBatch b;
    b.batch_size = batch;
    b.seq_len = seq_len;
    Rng rng(seed);
    b.tokens.resize(static_cast<size_t>(batch * seq_len));
    b.valid.assign(static_cast<size_t>(batch * seq_len), 1);
    for (auto & t : b.tokens) t = static_cast<int32_t>(rng.below(256));
    return b;
}

void bm_forward(benchmark::State & state) {
    const ModelConfig cfg = desk_config();
    const Checkpoint ckpt = init_params(cfg, 7);
    const TokenBatch raw = random_batch(state.range(0), 256, 11);
    BatchView view{raw.batch_size, raw.seq_len, raw.tokens.data(), raw.valid.data()};
    std::vector<float> logits;
    for (auto _ : state) {
        forward_batch(ckpt, view, logits);
        benchmark::DoNotOptimize(logits.data());
    }
    state.counters["tok/s"] = benchmark::Counter(
        static_cast<double>(raw.batch_size * raw.seq_len) * state.iterations(), benchmark::Counter::kIsRate);
}

void bm_train_step(benchmark::State & state) {
    const ModelConfig cfg = desk_config();
    Checkpoint ckpt = init_params(cfg, 7);
    const TokenBatch raw = random_batch(state.range(0), 256, 11);
    Rng mask_rng(3);
    TrainConfig tc;
    tc.objective = "ar";
    tc.total_steps = 1;
    tc.batch_tokens = raw.batch_size * raw.seq_len;
    const TrainBatch batch = prepare_batch(raw, "ar", 1e-3, mask_rng, kMaskId);
    OptimizerState opt;
    for (auto _ : state) {
        double loss = 0.0;
        auto grads = backward(ckpt, batch, &loss);
        adamw_step(ckpt, grads, opt, 1e-4, tc);
        benchmark::DoNotOptimize(loss);
    }
    state.counters["tok/s"] = benchmark::Counter(
        static_cast<double>(raw.batch_size * raw.seq_len) * state.iterations(), benchmark::Counter::kIsRate);
}

} // namespace

BENCHMARK(bm_forward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_train_step)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

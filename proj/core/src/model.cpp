#include "ltwin/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "ltwin/rng.hpp"

#ifdef __AVX512F__
#include <immintrin.h>
#endif

namespace ltwin {

std::string to_string(ProbeKind k) {
    return k == ProbeKind::residual_post_block ? "residual_post_block" : "qkv_input";
}

ProbeKind probe_kind_from_string(const std::string & s) {
    if (s == "residual_post_block") return ProbeKind::residual_post_block;
    if (s == "qkv_input") return ProbeKind::qkv_input;
    fail(ErrorKind::validation, "unknown probe kind: " + s);
}

double gelu_tanh(double x) {
    const double c = 0.7978845608028653558798921198687; // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

namespace {

// exp(x) via cephes-style order-11 polynomial after ln2 range reduction;
// |rel err| < 4e-16 over the reduced range, used for the hot gelu/softmax
// paths where libm exp dominates the profile.
inline double fast_exp(double x) {
    if (x > 709.0) return std::numeric_limits<double>::infinity();
    if (x < -745.0) return 0.0;
    const double log2e = 1.4426950408889634073599246810019;
    const double ln2_hi = 6.93147180369123816490e-01;
    const double ln2_lo = 1.90821492927058770002e-10;
    const double n = std::nearbyint(x * log2e);
    const double r = (x - n * ln2_hi) - n * ln2_lo;
    // exp(r) for |r| <= ln2/2, Horner over r
    double p = 2.5022322536502990E-8;
    p = p * r + 2.7630903488173108E-7;
    p = p * r + 2.7557314351390663E-6;
    p = p * r + 2.4801546952195962E-5;
    p = p * r + 1.9841269589115497E-4;
    p = p * r + 1.3888888894063186E-3;
    p = p * r + 8.3333333327800835E-3;
    p = p * r + 4.1666666666110491E-2;
    p = p * r + 1.6666666666666646E-1;
    p = p * r + 5.0000000000000000E-1;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // scale by 2^n through the exponent bits
    int64_t ni = static_cast<int64_t>(n);
    uint64_t bits;
    std::memcpy(&bits, &p, 8);
    bits += static_cast<uint64_t>(ni) << 52;
    std::memcpy(&p, &bits, 8);
    return p;
}

inline double fast_tanh(double u) {
    const double a = std::abs(u);
    if (a > 20.0) return u > 0.0 ? 1.0 : -1.0;
    const double e = fast_exp(2.0 * a);
    const double t = 1.0 - 2.0 / (e + 1.0);
    return u >= 0.0 ? t : -t;
}

double gelu_tanh_grad(double x) {
    const double c = 0.7978845608028653558798921198687;
    const double u = c * (x + 0.044715 * x * x * x);
    const double th = fast_tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

inline double gelu_tanh_fast(double x) {
    const double c = 0.7978845608028653558798921198687;
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + fast_tanh(u));
}

constexpr double kRmsEps = 1e-5;

// f64 dot of two f32 slices; one accumulator chain per element order.
inline double dot_f32(const float * a, const float * b, int n) {
#ifdef __AVX512F__
    __m512d acc = _mm512_setzero_pd();
    const int n8 = n - n % 8;
    for (int i = 0; i < n8; i += 8) {
        const __m512d va = _mm512_cvtps_pd(_mm256_loadu_ps(a + i));
        const __m512d vb = _mm512_cvtps_pd(_mm256_loadu_ps(b + i));
        acc = _mm512_fmadd_pd(va, vb, acc);
    }
    double s = _mm512_reduce_add_pd(acc);
    for (int i = n8; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
#else
    double lanes[8] = {};
    const int n8 = n - n % 8;
    for (int i = 0; i < n8; i += 8)
        for (int l = 0; l < 8; ++l) lanes[l] += static_cast<double>(a[i + l]) * static_cast<double>(b[i + l]);
    double s = 0.0;
    for (int l = 0; l < 8; ++l) s += lanes[l];
    for (int i = n8; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
#endif
}

// acc[0..n) += s * v[0..n) with f64 accumulation
inline void axpy_f32(double * acc, const float * v, double s, int n) {
#ifdef __AVX512F__
    const __m512d vs = _mm512_set1_pd(s);
    const int n8 = n - n % 8;
    for (int i = 0; i < n8; i += 8) {
        const __m512d vv = _mm512_cvtps_pd(_mm256_loadu_ps(v + i));
        _mm512_storeu_pd(acc + i, _mm512_fmadd_pd(vs, vv, _mm512_loadu_pd(acc + i)));
    }
    for (int i = n8; i < n; ++i) acc[i] += s * static_cast<double>(v[i]);
#else
    for (int i = 0; i < n; ++i) acc[i] += s * static_cast<double>(v[i]);
#endif
}

// y = x * gain / rms(x); inv_rms saved per row for the backward pass.
void rmsnorm_forward(const float * x, const float * gain, float * y, double * inv_rms, int64_t rows, int64_t d) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const float * xr = x + r * d;
        const double ss = dot_f32(xr, xr, static_cast<int>(d));
        const double ir = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
        inv_rms[r] = ir;
        float * yr = y + r * d;
        for (int64_t j = 0; j < d; ++j)
            yr[j] = static_cast<float>(static_cast<double>(xr[j]) * static_cast<double>(gain[j]) * ir);
    }
}

// dx (accumulated into dst) and dgain (f64 accumulator) from upstream dy.
void rmsnorm_backward(const float * x, const float * gain, const double * inv_rms, const float * dy, float * dx_out,
                      double * dgain, int64_t rows, int64_t d) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const float * xr = x + r * d;
        const float * dyr = dy + r * d;
        float * dxr = dx_out + r * d;
        const double ir = inv_rms[r];
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j)
            s += static_cast<double>(dyr[j]) * static_cast<double>(gain[j]) * static_cast<double>(xr[j]);
        const double coef = s * ir * ir * ir / static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
            const double v = static_cast<double>(dyr[j]) * static_cast<double>(gain[j]) * ir -
                             static_cast<double>(xr[j]) * coef;
            dxr[j] = static_cast<float>(static_cast<double>(dxr[j]) + v);
        }
    }
    // gain gradient reduced serially in row order
    for (int64_t r = 0; r < rows; ++r) {
        const float * xr = x + r * d;
        const float * dyr = dy + r * d;
        const double ir = inv_rms[r];
        for (int64_t j = 0; j < d; ++j)
            dgain[j] += static_cast<double>(dyr[j]) * static_cast<double>(xr[j]) * ir;
    }
}

struct RotaryTable {
    int64_t positions = 0;
    int half = 0;
    std::vector<double> cs, sn; // [positions x half]

    void build(int64_t n_pos, int64_t offset, int head_dim, float base) {
        half = head_dim / 2;
        positions = n_pos;
        cs.resize(static_cast<size_t>(n_pos * half));
        sn.resize(static_cast<size_t>(n_pos * half));
        for (int64_t p = 0; p < n_pos; ++p) {
            for (int u = 0; u < half; ++u) {
                const double theta = static_cast<double>(p + offset) *
                                     std::pow(static_cast<double>(base), -2.0 * u / static_cast<double>(head_dim));
                cs[static_cast<size_t>(p * half + u)] = std::cos(theta);
                sn[static_cast<size_t>(p * half + u)] = std::sin(theta);
            }
        }
    }
};

inline void rotate_rows(float * x, int64_t rows, int64_t d, int64_t seq_len, int n_heads, int head_dim,
                        const RotaryTable & table, bool inverse) {
    const int half = head_dim / 2;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t pos = r % seq_len;
        const double * c = table.cs.data() + pos * half;
        const double * s = table.sn.data() + pos * half;
        for (int h = 0; h < n_heads; ++h) {
            float * v = x + r * d + static_cast<int64_t>(h) * head_dim;
            for (int u = 0; u < half; ++u) {
                const double a = static_cast<double>(v[2 * u]);
                const double b = static_cast<double>(v[2 * u + 1]);
                const double sg = inverse ? -s[u] : s[u];
                v[2 * u] = static_cast<float>(a * c[u] - b * sg);
                v[2 * u + 1] = static_cast<float>(a * sg + b * c[u]);
            }
        }
    }
}

} // namespace

void rotary_apply(float * head_vec, int head_dim, int64_t position, float base) {
    if (head_dim % 2 != 0) fail(ErrorKind::validation, "rotary requires an even head dimension");
    const int half = head_dim / 2;
    for (int u = 0; u < half; ++u) {
        const double theta = static_cast<double>(position) *
                             std::pow(static_cast<double>(base), -2.0 * u / static_cast<double>(head_dim));
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = static_cast<double>(head_vec[2 * u]);
        const double b = static_cast<double>(head_vec[2 * u + 1]);
        head_vec[2 * u] = static_cast<float>(a * c - b * s);
        head_vec[2 * u + 1] = static_cast<float>(a * s + b * c);
    }
}

Checkpoint init_params(const ModelConfig & config, uint64_t seed) {
    config.validate();
    Checkpoint ckpt;
    ckpt.config = config;
    ckpt.meta.objective = config.attention_mode == AttentionMode::causal ? "ar" : "mdlm";
    ckpt.meta.seed = seed;
    Rng rng(seed);
    for (const auto & [name, shape] : canonical_tensor_shapes(config)) {
        TensorF32 t(shape);
        if (name.size() >= 4 && name.compare(name.size() - 4, 4, "gain") == 0) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else {
            for (float & v : t.data) v = static_cast<float>(rng.truncated_normal(0.02));
        }
        ckpt.tensors.emplace_back(name, std::move(t));
    }
    return ckpt;
}

namespace {

struct BlockWeightsView {
    const float *ln1, *wq, *wk, *wv, *wo, *ln2, *w_up, *w_down;
};

struct WeightsView {
    const ModelConfig * cfg;
    const float * embed;
    std::vector<BlockWeightsView> blocks;
    const float * final_ln;
    const float * lm_head;
};

WeightsView make_view(const Checkpoint & ckpt) {
    WeightsView v;
    v.cfg = &ckpt.config;
    v.embed = ckpt.tensor("embed.weight").data.data();
    for (int i = 0; i < ckpt.config.n_layers; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        BlockWeightsView b;
        b.ln1 = ckpt.tensor(p + "ln1.gain").data.data();
        b.wq = ckpt.tensor(p + "attn.wq").data.data();
        b.wk = ckpt.tensor(p + "attn.wk").data.data();
        b.wv = ckpt.tensor(p + "attn.wv").data.data();
        b.wo = ckpt.tensor(p + "attn.wo").data.data();
        b.ln2 = ckpt.tensor(p + "ln2.gain").data.data();
        b.w_up = ckpt.tensor(p + "mlp.w_up").data.data();
        b.w_down = ckpt.tensor(p + "mlp.w_down").data.data();
        v.blocks.push_back(b);
    }
    v.final_ln = ckpt.tensor("final_ln.gain").data.data();
    v.lm_head = ckpt.tensor("lm_head.weight").data.data();
    return v;
}

void apply_interventions(float * x, int64_t rows, int64_t d, const std::vector<Intervention> & interventions,
                         int layer) {
    for (const auto & iv : interventions) {
        if (layer < iv.layer_lo || layer > iv.layer_hi) continue;
        for (int64_t r = 0; r < rows; ++r) x[r * d + iv.channel] = 0.0f;
    }
}

void capture_point(const ForwardHooks & hooks, ProbeKind kind, int layer, const float * x, int64_t rows, int64_t d) {
    if (!hooks.trace) return;
    const ProbePoint want{kind, layer};
    bool requested = false;
    for (const auto & p : hooks.captures)
        if (p == want) requested = true;
    if (!requested) return;
    auto & dst = hooks.trace->probes[want];
    dst.insert(dst.end(), x, x + rows * d);
}

} // namespace

void forward_batch(const Checkpoint & ckpt, const BatchView & batch, std::vector<float> & logits, Tape * tape,
                   const ForwardHooks * hooks) {
    const ModelConfig & cfg = ckpt.config;
    cfg.validate();
    if (cfg.head_dim() % 2 != 0) fail(ErrorKind::validation, "head_dim must be even for rotary attention");
    const int64_t B = batch.batch;
    const int64_t L = batch.seq_len;
    const int64_t N = B * L;
    const int64_t d = cfg.d_model;
    const int64_t ff = cfg.d_ff;
    const int64_t V = cfg.vocab_size;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const bool causal = cfg.attention_mode == AttentionMode::causal;

    if (L > cfg.max_seq_len) fail(ErrorKind::validation, "sequence length exceeds max_seq_len");
    for (int64_t r = 0; r < N; ++r)
        if (batch.tokens[r] < 0 || batch.tokens[r] >= V)
            fail(ErrorKind::validation, "invalid token id " + std::to_string(batch.tokens[r]));
    if (hooks) {
        for (const auto & p : hooks->captures) {
            const int lo = p.kind == ProbeKind::residual_post_block ? 0 : 1;
            if (p.layer < lo || p.layer > cfg.n_layers)
                fail(ErrorKind::validation, "probe layer out of range");
        }
        for (const auto & iv : hooks->interventions) {
            if (iv.channel < 0 || iv.channel >= d) fail(ErrorKind::validation, "intervention channel out of range");
            if (iv.layer_lo < 0 || iv.layer_lo > iv.layer_hi || iv.layer_hi > cfg.n_layers)
                fail(ErrorKind::validation, "intervention layer range invalid");
        }
        if (hooks->trace && !hooks->captures.empty()) {
            if (B != 1) fail(ErrorKind::validation, "trace capture requires a batch of one sequence");
            ActivationTrace & tr = *hooks->trace;
            if (tr.d_model == 0) {
                tr.d_model = static_cast<int>(d);
                tr.n_layers = cfg.n_layers;
            } else if (tr.d_model != d || tr.n_layers != cfg.n_layers) {
                fail(ErrorKind::validation, "trace shape does not match the checkpoint");
            }
            for (int64_t r = 0; r < N; ++r) {
                const int64_t pos = r % L;
                tr.sample.push_back(hooks->sample_index);
                tr.copy.push_back(hooks->copy_index);
                tr.position.push_back(static_cast<int32_t>(pos));
                tr.valid.push_back(batch.valid ? batch.valid[r] : 1);
                tr.corrupted.push_back(
                    hooks->corrupted && pos < static_cast<int64_t>(hooks->corrupted->size())
                        ? (*hooks->corrupted)[static_cast<size_t>(pos)]
                        : 0);
                tr.t.push_back(hooks->t);
            }
        }
    }

    const WeightsView w = make_view(ckpt);
    static const std::vector<Intervention> no_interventions;
    const std::vector<Intervention> & ivs = hooks ? hooks->interventions : no_interventions;

    RotaryTable rot;
    rot.build(L, hooks ? hooks->position_offset : 0, hd, cfg.rotary_base);

    std::vector<float> x(static_cast<size_t>(N * d));
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < N; ++r)
        std::memcpy(x.data() + r * d, w.embed + static_cast<int64_t>(batch.tokens[r]) * d, sizeof(float) * d);

    apply_interventions(x.data(), N, d, ivs, 0);
    if (hooks) capture_point(*hooks, ProbeKind::residual_post_block, 0, x.data(), N, d);

    if (tape) {
        tape->batch = B;
        tape->seq_len = L;
        tape->rows = N;
        tape->tokens.assign(batch.tokens, batch.tokens + N);
        if (batch.valid)
            tape->valid.assign(batch.valid, batch.valid + N);
        else
            tape->valid.assign(static_cast<size_t>(N), 1);
        tape->blocks.assign(static_cast<size_t>(cfg.n_layers), BlockTape{});
    }

    // Scratch used when no tape wants the buffer; with a tape the per-layer
    // buffers live directly in it (no copies).
    std::vector<float> s_y1, s_q, s_k, s_v, s_attn, s_y2, s_u, s_probs;
    std::vector<double> s_ir1, s_ir2;
    std::vector<float> o(static_cast<size_t>(N * d)), g(static_cast<size_t>(N * ff)),
        dmlp(static_cast<size_t>(N * d));
    if (!tape) {
        s_y1.resize(static_cast<size_t>(N * d));
        s_q.resize(static_cast<size_t>(N * d));
        s_k.resize(static_cast<size_t>(N * d));
        s_v.resize(static_cast<size_t>(N * d));
        s_attn.resize(static_cast<size_t>(N * d));
        s_y2.resize(static_cast<size_t>(N * d));
        s_u.resize(static_cast<size_t>(N * ff));
        s_probs.resize(static_cast<size_t>(B) * H * L * L);
        s_ir1.resize(static_cast<size_t>(N));
        s_ir2.resize(static_cast<size_t>(N));
    }
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    for (int layer = 1; layer <= cfg.n_layers; ++layer) {
        const BlockWeightsView & blk = w.blocks[static_cast<size_t>(layer - 1)];
        BlockTape * bt = tape ? &tape->blocks[static_cast<size_t>(layer - 1)] : nullptr;
        float *y1, *q, *k, *v, *attn, *y2, *u, *probs;
        double *ir1, *ir2;
        if (bt) {
            bt->x_in = x;
            bt->y1.resize(static_cast<size_t>(N * d));
            bt->q.resize(static_cast<size_t>(N * d));
            bt->k.resize(static_cast<size_t>(N * d));
            bt->v.resize(static_cast<size_t>(N * d));
            bt->attn.resize(static_cast<size_t>(N * d));
            bt->y2.resize(static_cast<size_t>(N * d));
            bt->u.resize(static_cast<size_t>(N * ff));
            bt->probs.resize(static_cast<size_t>(B) * H * L * L);
            bt->inv_rms1.resize(static_cast<size_t>(N));
            bt->inv_rms2.resize(static_cast<size_t>(N));
            y1 = bt->y1.data();
            q = bt->q.data();
            k = bt->k.data();
            v = bt->v.data();
            attn = bt->attn.data();
            y2 = bt->y2.data();
            u = bt->u.data();
            probs = bt->probs.data();
            ir1 = bt->inv_rms1.data();
            ir2 = bt->inv_rms2.data();
        } else {
            y1 = s_y1.data();
            q = s_q.data();
            k = s_k.data();
            v = s_v.data();
            attn = s_attn.data();
            y2 = s_y2.data();
            u = s_u.data();
            probs = s_probs.data();
            ir1 = s_ir1.data();
            ir2 = s_ir2.data();
        }

        const std::string key_prefix =
            hooks && hooks->linear_sink ? "blocks." + std::to_string(layer - 1) + "." : std::string();

        rmsnorm_forward(x.data(), blk.ln1, y1, ir1, N, d);
        if (hooks) capture_point(*hooks, ProbeKind::qkv_input, layer, y1, N, d);
        if (hooks && hooks->linear_sink) hooks->linear_sink->add(key_prefix + "qkv", y1, N, d, batch.valid);

        matmul_bt_f32(y1, blk.wq, q, N, d, d);
        matmul_bt_f32(y1, blk.wk, k, N, d, d);
        matmul_bt_f32(y1, blk.wv, v, N, d, d);
        rotate_rows(q, N, d, L, H, hd, rot, false);
        rotate_rows(k, N, d, L, H, hd, rot, false);

        // attention per (sequence, head) on contiguous [L x hd] copies;
        // scores and softmax stay in f64
#pragma omp parallel for collapse(2) schedule(static)
        for (int64_t b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                std::vector<float> qc(static_cast<size_t>(L * hd)), kc(static_cast<size_t>(L * hd)),
                    vc(static_cast<size_t>(L * hd)), ac(static_cast<size_t>(L * hd));
                for (int64_t i = 0; i < L; ++i) {
                    std::memcpy(qc.data() + i * hd, q + (b * L + i) * d + h * hd, sizeof(float) * hd);
                    std::memcpy(kc.data() + i * hd, k + (b * L + i) * d + h * hd, sizeof(float) * hd);
                    std::memcpy(vc.data() + i * hd, v + (b * L + i) * d + h * hd, sizeof(float) * hd);
                }
                std::vector<double> scores(static_cast<size_t>(L * L));
                matmul_bt_f64out(qc.data(), kc.data(), scores.data(), L, hd, L);

                float * pbh = probs + ((b * H + h) * L) * L;
                for (int64_t i = 0; i < L; ++i) {
                    double * srow = scores.data() + i * L;
                    const int64_t jmax = causal ? i : L - 1;
                    double mx = -1e300;
                    for (int64_t j = 0; j <= jmax; ++j) {
                        if (batch.valid && !batch.valid[b * L + j]) continue;
                        mx = std::max(mx, srow[j] * inv_sqrt_hd);
                    }
                    float * prow = pbh + i * L;
                    std::fill(prow, prow + L, 0.0f);
                    if (mx <= -1e299) continue; // no visible keys
                    double z = 0.0;
                    for (int64_t j = 0; j <= jmax; ++j) {
                        if (batch.valid && !batch.valid[b * L + j]) continue;
                        const double e = fast_exp(srow[j] * inv_sqrt_hd - mx);
                        srow[j] = e;
                        z += e;
                    }
                    const double invz = 1.0 / z;
                    for (int64_t j = 0; j <= jmax; ++j) {
                        if (batch.valid && !batch.valid[b * L + j]) continue;
                        prow[j] = static_cast<float>(srow[j] * invz);
                    }
                }
                matmul_f32(pbh, vc.data(), ac.data(), L, L, hd);
                for (int64_t i = 0; i < L; ++i)
                    std::memcpy(attn + (b * L + i) * d + h * hd, ac.data() + i * hd, sizeof(float) * hd);
            }
        }

        if (hooks && hooks->linear_sink) hooks->linear_sink->add(key_prefix + "attn_out", attn, N, d, batch.valid);
        matmul_bt_f32(attn, blk.wo, o.data(), N, d, d);
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < N * d; ++r)
            x[static_cast<size_t>(r)] = static_cast<float>(static_cast<double>(x[static_cast<size_t>(r)]) +
                                                           static_cast<double>(o[static_cast<size_t>(r)]));

        if (bt) bt->x_mid = x;

        rmsnorm_forward(x.data(), blk.ln2, y2, ir2, N, d);
        if (hooks && hooks->linear_sink) hooks->linear_sink->add(key_prefix + "mlp_in", y2, N, d, batch.valid);
        matmul_bt_f32(y2, blk.w_up, u, N, d, ff);
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < N * ff; ++r)
            g[static_cast<size_t>(r)] =
                static_cast<float>(gelu_tanh_fast(static_cast<double>(u[static_cast<size_t>(r)])));
        if (hooks && hooks->linear_sink) hooks->linear_sink->add(key_prefix + "mlp_mid", g.data(), N, ff, batch.valid);
        matmul_bt_f32(g.data(), blk.w_down, dmlp.data(), N, ff, d);
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < N * d; ++r)
            x[static_cast<size_t>(r)] = static_cast<float>(static_cast<double>(x[static_cast<size_t>(r)]) +
                                                           static_cast<double>(dmlp[static_cast<size_t>(r)]));

        apply_interventions(x.data(), N, d, ivs, layer);
        if (hooks) capture_point(*hooks, ProbeKind::residual_post_block, layer, x.data(), N, d);
    }

    std::vector<float> yf(static_cast<size_t>(N * d));
    std::vector<double> inv_rms_f(static_cast<size_t>(N));
    rmsnorm_forward(x.data(), w.final_ln, yf.data(), inv_rms_f.data(), N, d);
    logits.resize(static_cast<size_t>(N * V));
    matmul_bt_f32(yf.data(), w.lm_head, logits.data(), N, d, V);

    if (tape) {
        tape->x_final = std::move(x);
        tape->y_final = std::move(yf);
        tape->inv_rms_final = std::move(inv_rms_f);
    }
    if (hooks && hooks->trace && !hooks->captures.empty()) hooks->trace->rows += N;
}

TensorF32 forward(const Checkpoint & ckpt, const TokenSequence & tokens, const ForwardHooks & hooks) {
    const int64_t L = static_cast<int64_t>(tokens.ids.size());
    BatchView batch;
    batch.batch = 1;
    batch.seq_len = L;
    batch.tokens = tokens.ids.data();
    batch.valid = tokens.valid.empty() ? nullptr : tokens.valid.data();
    std::vector<float> logits;
    forward_batch(ckpt, batch, logits, nullptr, &hooks);
    return TensorF32({L, ckpt.config.vocab_size}, std::move(logits));
}

std::vector<std::pair<std::string, TensorF32>> backward_from_dlogits(const Checkpoint & ckpt, const Tape & tape,
                                                                     const std::vector<float> & dlogits) {
    const ModelConfig & cfg = ckpt.config;
    const int64_t N = tape.rows;
    const int64_t L = tape.seq_len;
    const int64_t B = tape.batch;
    const int64_t d = cfg.d_model;
    const int64_t ff = cfg.d_ff;
    const int64_t V = cfg.vocab_size;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const bool causal = cfg.attention_mode == AttentionMode::causal;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    const WeightsView w = make_view(ckpt);

    std::vector<std::pair<std::string, TensorF32>> grads;
    for (const auto & [name, shape] : canonical_tensor_shapes(cfg)) grads.emplace_back(name, TensorF32(shape));
    auto grad = [&grads](const std::string & name) -> TensorF32 & {
        for (auto & [n, t] : grads)
            if (n == name) return t;
        fail(ErrorKind::validation, "no gradient slot for " + name);
    };

    RotaryTable rot;
    rot.build(L, 0, hd, cfg.rotary_base);

    matmul_at_b_f32(dlogits.data(), tape.y_final.data(), grad("lm_head.weight").data.data(), N, V, d);
    std::vector<float> dyf(static_cast<size_t>(N * d));
    matmul_f32(dlogits.data(), w.lm_head, dyf.data(), N, V, d);

    std::vector<float> dx(static_cast<size_t>(N * d), 0.0f);
    {
        std::vector<double> dgain(static_cast<size_t>(d), 0.0);
        rmsnorm_backward(tape.x_final.data(), w.final_ln, tape.inv_rms_final.data(), dyf.data(), dx.data(),
                         dgain.data(), N, d);
        TensorF32 & gg = grad("final_ln.gain");
        for (int64_t j = 0; j < d; ++j) gg.data[static_cast<size_t>(j)] = static_cast<float>(dgain[static_cast<size_t>(j)]);
    }

    std::vector<float> dy2(static_cast<size_t>(N * d)), du(static_cast<size_t>(N * ff)),
        dgl(static_cast<size_t>(N * ff)), gbuf(static_cast<size_t>(N * ff)), dxmid(static_cast<size_t>(N * d)),
        dattn(static_cast<size_t>(N * d)), dq(static_cast<size_t>(N * d)), dk(static_cast<size_t>(N * d)),
        dv(static_cast<size_t>(N * d)), dy1(static_cast<size_t>(N * d)), tmp(static_cast<size_t>(N * d));

    for (int layer = cfg.n_layers; layer >= 1; --layer) {
        const BlockTape & bt = tape.blocks[static_cast<size_t>(layer - 1)];
        const BlockWeightsView & blk = w.blocks[static_cast<size_t>(layer - 1)];
        const std::string p = "blocks." + std::to_string(layer - 1) + ".";

        // ---- MLP branch: dx holds the gradient at the block output ----
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < N * ff; ++r)
            gbuf[static_cast<size_t>(r)] =
                static_cast<float>(gelu_tanh_fast(static_cast<double>(bt.u[static_cast<size_t>(r)])));

        matmul_at_b_f32(dx.data(), gbuf.data(), grad(p + "mlp.w_down").data.data(), N, d, ff);
        matmul_f32(dx.data(), blk.w_down, dgl.data(), N, d, ff);
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < N * ff; ++r)
            du[static_cast<size_t>(r)] =
                static_cast<float>(static_cast<double>(dgl[static_cast<size_t>(r)]) *
                                   gelu_tanh_grad(static_cast<double>(bt.u[static_cast<size_t>(r)])));
        matmul_at_b_f32(du.data(), bt.y2.data(), grad(p + "mlp.w_up").data.data(), N, ff, d);
        matmul_f32(du.data(), blk.w_up, dy2.data(), N, ff, d);

        // dxmid = dx (residual passthrough) + rmsnorm backward of dy2
        dxmid = dx;
        {
            std::vector<double> dgain(static_cast<size_t>(d), 0.0);
            rmsnorm_backward(bt.x_mid.data(), blk.ln2, bt.inv_rms2.data(), dy2.data(), dxmid.data(), dgain.data(),
                             N, d);
            TensorF32 & gg = grad(p + "ln2.gain");
            for (int64_t j = 0; j < d; ++j)
                gg.data[static_cast<size_t>(j)] = static_cast<float>(dgain[static_cast<size_t>(j)]);
        }

        // ---- attention branch ----
        matmul_at_b_f32(dxmid.data(), bt.attn.data(), grad(p + "attn.wo").data.data(), N, d, d);
        matmul_f32(dxmid.data(), blk.wo, dattn.data(), N, d, d);

#pragma omp parallel for collapse(2) schedule(static)
        for (int64_t b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const float * pbh = bt.probs.data() + ((b * H + h) * L) * L;
                std::vector<float> qc(static_cast<size_t>(L * hd)), kc(static_cast<size_t>(L * hd)),
                    vc(static_cast<size_t>(L * hd)), dac(static_cast<size_t>(L * hd));
                for (int64_t i = 0; i < L; ++i) {
                    std::memcpy(qc.data() + i * hd, bt.q.data() + (b * L + i) * d + h * hd, sizeof(float) * hd);
                    std::memcpy(kc.data() + i * hd, bt.k.data() + (b * L + i) * d + h * hd, sizeof(float) * hd);
                    std::memcpy(vc.data() + i * hd, bt.v.data() + (b * L + i) * d + h * hd, sizeof(float) * hd);
                    std::memcpy(dac.data() + i * hd, dattn.data() + (b * L + i) * d + h * hd,
                                sizeof(float) * hd);
                }
                // dP = dA V^T, then softmax backward into f32 dS
                std::vector<double> dp(static_cast<size_t>(L * L));
                matmul_bt_f64out(dac.data(), vc.data(), dp.data(), L, hd, L);
                std::vector<float> ds(static_cast<size_t>(L * L), 0.0f);
                for (int64_t i = 0; i < L; ++i) {
                    const float * prow = pbh + i * L;
                    const double * dpr = dp.data() + i * L;
                    double inner = 0.0;
                    for (int64_t j = 0; j < L; ++j) inner += dpr[j] * static_cast<double>(prow[j]);
                    float * dsr = ds.data() + i * L;
                    for (int64_t j = 0; j < L; ++j) {
                        const double pv = static_cast<double>(prow[j]);
                        if (pv != 0.0) dsr[j] = static_cast<float>(pv * (dpr[j] - inner) * inv_sqrt_hd);
                    }
                }
                // dQ = dS K, dK = dS^T Q, dV = P^T dA
                std::vector<float> dqc(static_cast<size_t>(L * hd)), dkc(static_cast<size_t>(L * hd)),
                    dvc(static_cast<size_t>(L * hd));
                matmul_f32(ds.data(), kc.data(), dqc.data(), L, L, hd);
                matmul_at_b_f32(ds.data(), qc.data(), dkc.data(), L, L, hd);
                matmul_at_b_f32(pbh, dac.data(), dvc.data(), L, L, hd);
                for (int64_t i = 0; i < L; ++i) {
                    std::memcpy(dq.data() + (b * L + i) * d + h * hd, dqc.data() + i * hd, sizeof(float) * hd);
                    std::memcpy(dk.data() + (b * L + i) * d + h * hd, dkc.data() + i * hd, sizeof(float) * hd);
                    std::memcpy(dv.data() + (b * L + i) * d + h * hd, dvc.data() + i * hd, sizeof(float) * hd);
                }
            }
        }

        // undo rotary on dq, dk
        rotate_rows(dq.data(), N, d, L, H, hd, rot, true);
        rotate_rows(dk.data(), N, d, L, H, hd, rot, true);

        // project back to y1 and weight grads
        matmul_at_b_f32(dq.data(), bt.y1.data(), grad(p + "attn.wq").data.data(), N, d, d);
        matmul_at_b_f32(dk.data(), bt.y1.data(), grad(p + "attn.wk").data.data(), N, d, d);
        matmul_at_b_f32(dv.data(), bt.y1.data(), grad(p + "attn.wv").data.data(), N, d, d);
        matmul_f32(dq.data(), blk.wq, dy1.data(), N, d, d);
        matmul_f32(dk.data(), blk.wk, tmp.data(), N, d, d);
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < N * d; ++r)
            dy1[static_cast<size_t>(r)] = static_cast<float>(static_cast<double>(dy1[static_cast<size_t>(r)]) +
                                                             static_cast<double>(tmp[static_cast<size_t>(r)]));
        matmul_f32(dv.data(), blk.wv, tmp.data(), N, d, d);
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < N * d; ++r)
            dy1[static_cast<size_t>(r)] = static_cast<float>(static_cast<double>(dy1[static_cast<size_t>(r)]) +
                                                             static_cast<double>(tmp[static_cast<size_t>(r)]));

        // dx = dxmid (residual) + rmsnorm backward of dy1
        dx = dxmid;
        {
            std::vector<double> dgain(static_cast<size_t>(d), 0.0);
            rmsnorm_backward(bt.x_in.data(), blk.ln1, bt.inv_rms1.data(), dy1.data(), dx.data(), dgain.data(), N, d);
            TensorF32 & gg = grad(p + "ln1.gain");
            for (int64_t j = 0; j < d; ++j)
                gg.data[static_cast<size_t>(j)] = static_cast<float>(dgain[static_cast<size_t>(j)]);
        }
    }

    // embedding scatter-add, serial row order, f64 accumulation
    {
        std::vector<double> acc(static_cast<size_t>(V * d), 0.0);
        for (int64_t r = 0; r < N; ++r) {
            const int64_t tok = tape.tokens[static_cast<size_t>(r)];
            axpy_f32(acc.data() + tok * d, dx.data() + r * d, 1.0, static_cast<int>(d));
        }
        TensorF32 & ge = grad("embed.weight");
        for (int64_t i = 0; i < V * d; ++i) ge.data[static_cast<size_t>(i)] = static_cast<float>(acc[static_cast<size_t>(i)]);
    }

    return grads;
}

void save_trace(const ActivationTrace & trace, const std::string & path) {
    Container c;
    c.config = {{"d_model", trace.d_model}, {"n_layers", trace.n_layers}};
    c.meta = {{"rows", trace.rows}};
    for (const auto & [point, data] : trace.probes) {
        const std::string name = "trace." + to_string(point.kind) + "." + std::to_string(point.layer);
        c.tensors.emplace_back(name, TensorF32({trace.rows, trace.d_model}, data));
    }
    auto push_meta = [&c, &trace](const std::string & name, auto get) {
        TensorF32 t({trace.rows});
        for (int64_t r = 0; r < trace.rows; ++r) t.data[static_cast<size_t>(r)] = static_cast<float>(get(r));
        c.tensors.emplace_back("trace.meta." + name, std::move(t));
    };
    push_meta("sample", [&](int64_t r) { return trace.sample[static_cast<size_t>(r)]; });
    push_meta("copy", [&](int64_t r) { return trace.copy[static_cast<size_t>(r)]; });
    push_meta("position", [&](int64_t r) { return trace.position[static_cast<size_t>(r)]; });
    push_meta("valid", [&](int64_t r) { return trace.valid[static_cast<size_t>(r)]; });
    push_meta("corrupted", [&](int64_t r) { return trace.corrupted[static_cast<size_t>(r)]; });
    push_meta("t", [&](int64_t r) { return trace.t[static_cast<size_t>(r)]; });
    save_container(c, path);
}

ActivationTrace load_trace(const std::string & path) {
    Container c = load_container(path);
    ActivationTrace tr;
    tr.d_model = c.config.at("d_model").get<int>();
    tr.n_layers = c.config.at("n_layers").get<int>();
    tr.rows = c.meta.at("rows").get<int64_t>();
    for (auto & [name, t] : c.tensors) {
        if (name.rfind("trace.meta.", 0) == 0) {
            const std::string field = name.substr(11);
            auto as_i32 = [&t]() {
                std::vector<int32_t> v(t.data.size());
                for (size_t i = 0; i < t.data.size(); ++i) v[i] = static_cast<int32_t>(t.data[i]);
                return v;
            };
            auto as_u8 = [&t]() {
                std::vector<uint8_t> v(t.data.size());
                for (size_t i = 0; i < t.data.size(); ++i) v[i] = t.data[i] != 0.0f ? 1 : 0;
                return v;
            };
            if (field == "sample") tr.sample = as_i32();
            else if (field == "copy") tr.copy = as_i32();
            else if (field == "position") tr.position = as_i32();
            else if (field == "valid") tr.valid = as_u8();
            else if (field == "corrupted") tr.corrupted = as_u8();
            else if (field == "t") tr.t = t.data;
            else fail(ErrorKind::io, path + ": unknown trace metadata field " + field);
            continue;
        }
        if (name.rfind("trace.", 0) != 0) fail(ErrorKind::io, path + ": unexpected tensor " + name);
        const std::string rest = name.substr(6);
        const size_t dot = rest.rfind('.');
        if (dot == std::string::npos) fail(ErrorKind::io, path + ": malformed trace tensor name " + name);
        ProbePoint pt;
        pt.kind = probe_kind_from_string(rest.substr(0, dot));
        pt.layer = std::stoi(rest.substr(dot + 1));
        tr.probes[pt] = std::move(t.data);
    }
    return tr;
}

ActivationTrace capture_trace(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration,
                              const MaskingConfig & masking, const std::vector<ProbePoint> & captures,
                              const std::vector<Intervention> & interventions, const std::vector<double> * forced_t) {
    masking.validate();
    ActivationTrace trace;
    for (size_t s = 0; s < calibration.size(); ++s) {
        MaskingConfig per_sample = masking;
        per_sample.seed = derive_seed(masking.seed, s);
        const auto copies = make_masked_copies(calibration[s], per_sample, forced_t);
        for (size_t ci = 0; ci < copies.size(); ++ci) {
            ForwardHooks hooks;
            hooks.captures = captures;
            hooks.interventions = interventions;
            hooks.trace = &trace;
            hooks.sample_index = static_cast<int32_t>(s);
            hooks.copy_index = static_cast<int32_t>(ci);
            hooks.t = static_cast<float>(copies[ci].t);
            hooks.corrupted = &copies[ci].corrupted;
            forward(ckpt, copies[ci].seq, hooks);
        }
    }
    return trace;
}

} // namespace ltwin

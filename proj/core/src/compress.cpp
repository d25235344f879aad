#include "ltwin/compress.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ltwin/model.hpp"

namespace ltwin {

std::string to_string(ScheduleMode m) {
    switch (m) {
        case ScheduleMode::uniform: return "uniform";
        case ScheduleMode::eis: return "eis";
        case ScheduleMode::dis: return "dis";
    }
    return "uniform";
}

ScheduleMode schedule_mode_from_string(const std::string & s) {
    if (s == "uniform") return ScheduleMode::uniform;
    if (s == "eis") return ScheduleMode::eis;
    if (s == "dis") return ScheduleMode::dis;
    fail(ErrorKind::validation, "unknown schedule mode: " + s);
}

SparsitySchedule sparsity_schedule(int n_layers, double s, double epsilon, ScheduleMode mode) {
    if (n_layers < 1) fail(ErrorKind::validation, "schedule needs at least one layer");
    if (!(s >= 0.0 && s < 1.0)) fail(ErrorKind::validation, "average sparsity must lie in [0,1)");
    SparsitySchedule sched;
    sched.mode = mode;
    sched.s = s;
    sched.epsilon = epsilon;

    if (mode == ScheduleMode::uniform) {
        sched.per_layer.assign(static_cast<size_t>(n_layers), s);
        return sched;
    }
    if (epsilon < 0.0) fail(ErrorKind::validation, "epsilon must be >= 0");
    if (s - epsilon < 0.0 || s + epsilon >= 1.0)
        fail(ErrorKind::validation, "sparsity ramp leaves [0,1): s=" + std::to_string(s) +
                                        " epsilon=" + std::to_string(epsilon));

    // Ramp coefficients 1 - 2(t-1)/(T-1), mirrored so that coef[T-1-i] is the
    // exact negation of coef[i]; this makes reversed(EIS) == DIS bit-exact.
    const int T = n_layers;
    std::vector<double> coef(static_cast<size_t>(T), 0.0);
    if (T == 1) {
        coef[0] = 0.0; // degenerate ramp collapses to the average
    } else {
        for (int t = 0; t < (T + 1) / 2; ++t) {
            const double c = 1.0 - 2.0 * static_cast<double>(t) / static_cast<double>(T - 1);
            coef[static_cast<size_t>(t)] = c;
            coef[static_cast<size_t>(T - 1 - t)] = -c;
        }
        if (T % 2 == 1) coef[static_cast<size_t>(T / 2)] = 0.0;
    }

    sched.per_layer.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        const double dev = epsilon * coef[static_cast<size_t>(t)];
        sched.per_layer[static_cast<size_t>(t)] = mode == ScheduleMode::eis ? s + dev : s - dev;
    }
    return sched;
}

std::string input_key_for_weight(const std::string & weight_name) {
    const size_t dot = weight_name.find('.', 7); // after "blocks."
    if (weight_name.rfind("blocks.", 0) != 0 || dot == std::string::npos)
        fail(ErrorKind::validation, "no calibration input defined for tensor " + weight_name);
    const std::string prefix = weight_name.substr(0, dot + 1);
    const std::string rest = weight_name.substr(dot + 1);
    if (rest == "attn.wq" || rest == "attn.wk" || rest == "attn.wv") return prefix + "qkv";
    if (rest == "attn.wo") return prefix + "attn_out";
    if (rest == "mlp.w_up") return prefix + "mlp_in";
    if (rest == "mlp.w_down") return prefix + "mlp_mid";
    fail(ErrorKind::validation, "no calibration input defined for tensor " + weight_name);
}

namespace {

class HessianSink : public LinearInputSink {
  public:
    void add(const std::string & key, const float * rows, int64_t n_rows, int64_t width,
             const uint8_t * valid) override {
        auto & acc = h_[key];
        if (acc.empty()) {
            acc.assign(static_cast<size_t>(width * width), 0.0);
            width_[key] = width;
        }
        for (int64_t r = 0; r < n_rows; ++r) {
            if (valid && !valid[r]) continue;
            const float * x = rows + r * width;
            for (int64_t i = 0; i < width; ++i) {
                const double xi = static_cast<double>(x[i]);
                if (xi == 0.0) continue;
                double * hrow = acc.data() + i * width;
                for (int64_t j = i; j < width; ++j) hrow[j] += xi * static_cast<double>(x[j]);
            }
        }
    }

    void symmetrize() {
        for (auto & [key, acc] : h_) {
            const int64_t w = width_[key];
            for (int64_t i = 0; i < w; ++i)
                for (int64_t j = i + 1; j < w; ++j) acc[static_cast<size_t>(j * w + i)] = acc[static_cast<size_t>(i * w + j)];
        }
    }

    std::map<std::string, std::vector<double>> h_;
    std::map<std::string, int64_t> width_;
    int64_t tokens_ = 0;
};

void run_calibration(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration, HessianSink & sink) {
    if (calibration.empty()) fail(ErrorKind::insufficient_data, "empty calibration set");
    for (const auto & seq : calibration) {
        ForwardHooks hooks;
        hooks.linear_sink = &sink;
        forward(ckpt, seq, hooks);
        for (uint8_t v : seq.valid) sink.tokens_ += v ? 1 : 0;
    }
    sink.symmetrize();
}

} // namespace

LayerHessians collect_hessians(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration) {
    HessianSink sink;
    run_calibration(ckpt, calibration, sink);
    LayerHessians out;
    out.tokens = sink.tokens_;
    // re-key by weight name
    for (const auto & [name, shape] : canonical_tensor_shapes(ckpt.config)) {
        if (name.rfind("blocks.", 0) != 0 || shape.size() != 2) continue;
        const std::string key = input_key_for_weight(name);
        out.h[name] = sink.h_.at(key);
        out.width[name] = sink.width_.at(key);
    }
    return out;
}

FeatureNorms collect_feature_norms(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration) {
    // norm_j = sqrt(sum_tokens x_j^2) = sqrt(diag H)
    HessianSink sink;
    run_calibration(ckpt, calibration, sink);
    FeatureNorms norms;
    for (const auto & [name, shape] : canonical_tensor_shapes(ckpt.config)) {
        if (name.rfind("blocks.", 0) != 0 || shape.size() != 2) continue;
        const std::string key = input_key_for_weight(name);
        const auto & h = sink.h_.at(key);
        const int64_t w = sink.width_.at(key);
        std::vector<double> n(static_cast<size_t>(w));
        for (int64_t j = 0; j < w; ++j) n[static_cast<size_t>(j)] = std::sqrt(h[static_cast<size_t>(j * w + j)]);
        norms.norms[name] = std::move(n);
    }
    return norms;
}

PruneResult wanda_prune(const TensorF32 & weight, const std::vector<double> & norms, double sparsity) {
    if (weight.rank() != 2) fail(ErrorKind::dimension, "wanda_prune expects a rank-2 weight");
    const int64_t out = weight.shape[0];
    const int64_t in = weight.shape[1];
    if (static_cast<int64_t>(norms.size()) != in)
        fail(ErrorKind::dimension, "feature norm length does not match weight input width");
    if (!(sparsity >= 0.0 && sparsity < 1.0)) fail(ErrorKind::validation, "sparsity must lie in [0,1)");

    PruneResult res;
    res.weight = weight;
    res.keep_mask.assign(weight.data.size(), 1);
    const int64_t n_zero = static_cast<int64_t>(std::floor(sparsity * static_cast<double>(in)));
    if (n_zero == 0) return res;

    std::vector<int64_t> idx(static_cast<size_t>(in));
    std::vector<double> score(static_cast<size_t>(in));
    for (int64_t r = 0; r < out; ++r) {
        for (int64_t j = 0; j < in; ++j) {
            idx[static_cast<size_t>(j)] = j;
            score[static_cast<size_t>(j)] =
                std::abs(static_cast<double>(weight.at(r, j))) * norms[static_cast<size_t>(j)];
        }
        // lowest score first, ties by lower column index
        std::sort(idx.begin(), idx.end(), [&score](int64_t a, int64_t b) {
            if (score[static_cast<size_t>(a)] != score[static_cast<size_t>(b)])
                return score[static_cast<size_t>(a)] < score[static_cast<size_t>(b)];
            return a < b;
        });
        for (int64_t z = 0; z < n_zero; ++z) {
            const int64_t j = idx[static_cast<size_t>(z)];
            res.weight.at(r, j) = 0.0f;
            res.keep_mask[static_cast<size_t>(r * in + j)] = 0;
        }
    }
    return res;
}

Checkpoint prune_model(const Checkpoint & ckpt, const SparsitySchedule & schedule,
                       const std::vector<TokenSequence> & calibration, PruneReport * report) {
    ckpt.validate();
    if (static_cast<int>(schedule.per_layer.size()) != ckpt.config.n_layers)
        fail(ErrorKind::validation, "schedule length does not match the model depth");

    const FeatureNorms norms = collect_feature_norms(ckpt, calibration);
    Checkpoint pruned = ckpt;
    if (report) {
        report->layer_sparsity = schedule.per_layer;
        report->zeros_per_layer.assign(static_cast<size_t>(ckpt.config.n_layers), 0);
    }
    static const char * kProjections[] = {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w_up", "mlp.w_down"};
    for (int layer = 0; layer < ckpt.config.n_layers; ++layer) {
        const double s = schedule.per_layer[static_cast<size_t>(layer)];
        for (const char * proj : kProjections) {
            const std::string name = "blocks." + std::to_string(layer) + "." + proj;
            PruneResult pr = wanda_prune(pruned.tensor(name), norms.norms.at(name), s);
            if (report) {
                int64_t zeros = 0;
                for (uint8_t keep : pr.keep_mask) zeros += keep ? 0 : 1;
                report->zeros_per_layer[static_cast<size_t>(layer)] += zeros;
            }
            pruned.tensor(name) = std::move(pr.weight);
        }
    }
    return pruned;
}

void QuantConfig::validate(int64_t row_width) const {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8 && bits != 16)
        fail(ErrorKind::validation, "bits must be one of {2,3,4,8,16}");
    if (!(damping >= 0.0)) fail(ErrorKind::validation, "damping must be >= 0");
    if (group_size > 0 && row_width % group_size != 0)
        fail(ErrorKind::validation, "group_size must divide the row width (or be whole-row)");
}

QuantizedGroup quantize_grid(const std::vector<float> & group, int bits) {
    if (group.empty()) fail(ErrorKind::validation, "quantize_grid: empty group");
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8)
        fail(ErrorKind::validation, "quantize_grid bits must be one of {2,3,4,8}");
    const double maxq = static_cast<double>((1 << bits) - 1);
    double lo = group[0], hi = group[0];
    for (float v : group) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    QuantizedGroup out;
    out.scale = hi > lo ? (hi - lo) / maxq : 1.0;
    out.zero_point = static_cast<int64_t>(std::llround(-lo / out.scale));
    out.q.resize(group.size());
    out.dequant.resize(group.size());
    for (size_t i = 0; i < group.size(); ++i) {
        int64_t q = std::llround(static_cast<double>(group[i]) / out.scale) + out.zero_point;
        q = std::clamp<int64_t>(q, 0, static_cast<int64_t>(maxq));
        out.q[i] = q;
        out.dequant[i] = static_cast<float>(static_cast<double>(q - out.zero_point) * out.scale);
    }
    return out;
}

namespace {

struct GroupGrid {
    double scale = 1.0;
    int64_t zero = 0;
};

GroupGrid grid_of(const double * vals, int64_t n, int bits) {
    const double maxq = static_cast<double>((1 << bits) - 1);
    double lo = vals[0], hi = vals[0];
    for (int64_t i = 1; i < n; ++i) {
        lo = std::min(lo, vals[i]);
        hi = std::max(hi, vals[i]);
    }
    GroupGrid g;
    g.scale = hi > lo ? (hi - lo) / maxq : 1.0;
    g.zero = static_cast<int64_t>(std::llround(-lo / g.scale));
    return g;
}

double quantize_value(double v, const GroupGrid & g, int bits) {
    const int64_t maxq = (1 << bits) - 1;
    int64_t q = std::llround(v / g.scale) + g.zero;
    q = std::clamp<int64_t>(q, 0, maxq);
    return static_cast<double>(q - g.zero) * g.scale;
}

} // namespace

TensorF32 gptq_from_hessian(const TensorF32 & weight, const std::vector<double> & hessian, const QuantConfig & cfg) {
    const int64_t out = weight.shape[0];
    const int64_t in = weight.shape[1];
    cfg.validate(in);
    if (cfg.bits == 16) return weight;
    if (static_cast<int64_t>(hessian.size()) != in * in)
        fail(ErrorKind::dimension, "hessian size does not match weight input width");

    // column processing order
    std::vector<int64_t> order(static_cast<size_t>(in));
    for (int64_t j = 0; j < in; ++j) order[static_cast<size_t>(j)] = j;
    if (cfg.order == ColumnOrder::activation) {
        std::stable_sort(order.begin(), order.end(), [&hessian, in](int64_t a, int64_t b) {
            return hessian[static_cast<size_t>(a * in + a)] > hessian[static_cast<size_t>(b * in + b)];
        });
    }

    // permuted Hessian with escalating damping until both factorizations pass
    double mean_diag = 0.0;
    for (int64_t j = 0; j < in; ++j) mean_diag += hessian[static_cast<size_t>(j * in + j)];
    mean_diag /= static_cast<double>(in);

    TensorF32 lfac;
    double lambda = cfg.damping * mean_diag;
    if (lambda <= 0.0) lambda = 1e-8 * (mean_diag > 0.0 ? mean_diag : 1.0);
    bool ok = false;
    for (int attempt = 0; attempt <= 3; ++attempt) {
        TensorF32 hperm({in, in});
        for (int64_t i = 0; i < in; ++i)
            for (int64_t j = 0; j < in; ++j)
                hperm.at(i, j) = static_cast<float>(
                    hessian[static_cast<size_t>(order[static_cast<size_t>(i)] * in + order[static_cast<size_t>(j)])] +
                    (i == j ? lambda : 0.0));
        try {
            const TensorF32 hinv = inverse_via_cholesky(hperm);
            lfac = cholesky_lower(hinv);
            ok = true;
            break;
        } catch (const Error & e) {
            if (e.kind() != ErrorKind::not_positive_definite && e.kind() != ErrorKind::validation) throw;
            lambda *= 10.0;
        }
    }
    if (!ok) fail(ErrorKind::numeric, "gptq: Hessian stayed indefinite after damping escalation");

    // f64 working copy in processing order
    std::vector<double> wwork(static_cast<size_t>(out * in));
    for (int64_t r = 0; r < out; ++r)
        for (int64_t j = 0; j < in; ++j)
            wwork[static_cast<size_t>(r * in + j)] =
                static_cast<double>(weight.at(r, order[static_cast<size_t>(j)]));

    const int64_t gs = cfg.group_size > 0 ? cfg.group_size : in;
    const int64_t n_groups = (in + gs - 1) / gs;
    std::vector<GroupGrid> grids(static_cast<size_t>(out * n_groups));
    std::vector<uint8_t> frozen(static_cast<size_t>(n_groups), 0);
    std::vector<double> qcol(static_cast<size_t>(out));

    for (int64_t j = 0; j < in; ++j) {
        const int64_t g = j / gs;
        if (!frozen[static_cast<size_t>(g)]) {
            const int64_t glo = g * gs;
            const int64_t gn = std::min(gs, in - glo);
            for (int64_t r = 0; r < out; ++r)
                grids[static_cast<size_t>(r * n_groups + g)] =
                    grid_of(wwork.data() + r * in + glo, gn, cfg.bits);
            frozen[static_cast<size_t>(g)] = 1;
        }
        const double ljj = static_cast<double>(lfac.at(j, j));
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < out; ++r) {
            const double wv = wwork[static_cast<size_t>(r * in + j)];
            const double dq = quantize_value(wv, grids[static_cast<size_t>(r * n_groups + g)], cfg.bits);
            const double err = (wv - dq) / ljj;
            wwork[static_cast<size_t>(r * in + j)] = dq;
            double * wrow = wwork.data() + r * in;
            for (int64_t jp = j + 1; jp < in; ++jp)
                wrow[jp] -= err * static_cast<double>(lfac.at(jp, j));
            qcol[static_cast<size_t>(r)] = dq;
        }
    }

    TensorF32 result({out, in});
    for (int64_t r = 0; r < out; ++r)
        for (int64_t j = 0; j < in; ++j)
            result.at(r, order[static_cast<size_t>(j)]) = static_cast<float>(wwork[static_cast<size_t>(r * in + j)]);
    return result;
}

TensorF32 gptq_quantize(const TensorF32 & weight, const std::vector<std::vector<float>> & calib_inputs,
                        const QuantConfig & cfg) {
    if (weight.rank() != 2) fail(ErrorKind::dimension, "gptq_quantize expects a rank-2 weight");
    const int64_t in = weight.shape[1];
    cfg.validate(in);
    if (cfg.bits == 16) return weight;
    if (calib_inputs.empty()) fail(ErrorKind::insufficient_data, "gptq_quantize: empty calibration inputs");

    std::vector<double> h(static_cast<size_t>(in * in), 0.0);
    for (const auto & x : calib_inputs) {
        if (static_cast<int64_t>(x.size()) != in)
            fail(ErrorKind::dimension, "calibration input width does not match the weight");
        for (int64_t i = 0; i < in; ++i)
            for (int64_t j = 0; j < in; ++j)
                h[static_cast<size_t>(i * in + j)] +=
                    static_cast<double>(x[static_cast<size_t>(i)]) * static_cast<double>(x[static_cast<size_t>(j)]);
    }
    return gptq_from_hessian(weight, h, cfg);
}

TensorF32 rtn_quantize(const TensorF32 & weight, const QuantConfig & cfg) {
    const int64_t out = weight.shape[0];
    const int64_t in = weight.shape[1];
    cfg.validate(in);
    if (cfg.bits == 16) return weight;
    const int64_t gs = cfg.group_size > 0 ? cfg.group_size : in;
    TensorF32 result({out, in});
    for (int64_t r = 0; r < out; ++r) {
        for (int64_t glo = 0; glo < in; glo += gs) {
            const int64_t gn = std::min(gs, in - glo);
            std::vector<double> vals(static_cast<size_t>(gn));
            for (int64_t j = 0; j < gn; ++j) vals[static_cast<size_t>(j)] = static_cast<double>(weight.at(r, glo + j));
            const GroupGrid grid = grid_of(vals.data(), gn, cfg.bits);
            for (int64_t j = 0; j < gn; ++j)
                result.at(r, glo + j) = static_cast<float>(quantize_value(vals[static_cast<size_t>(j)], grid, cfg.bits));
        }
    }
    return result;
}

namespace {

// ||X (A - B)^T||_F^2 == tr((A-B) H (A-B)^T) with H = X^T X.
double reconstruction_error(const TensorF32 & a, const TensorF32 & b, const std::vector<double> & h) {
    const int64_t out = a.shape[0];
    const int64_t in = a.shape[1];
    double total = 0.0;
    std::vector<double> diff(static_cast<size_t>(in));
    for (int64_t r = 0; r < out; ++r) {
        for (int64_t j = 0; j < in; ++j)
            diff[static_cast<size_t>(j)] = static_cast<double>(a.at(r, j)) - static_cast<double>(b.at(r, j));
        for (int64_t i = 0; i < in; ++i) {
            if (diff[static_cast<size_t>(i)] == 0.0) continue;
            const double * hrow = h.data() + i * in;
            double s = 0.0;
            for (int64_t j = 0; j < in; ++j) s += hrow[j] * diff[static_cast<size_t>(j)];
            total += diff[static_cast<size_t>(i)] * s;
        }
    }
    return std::sqrt(std::max(0.0, total));
}

} // namespace

Checkpoint quantize_model(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration,
                          const QuantConfig & cfg, std::vector<QuantLayerReport> * report) {
    ckpt.validate();
    if (cfg.bits == 16) {
        if (report) report->clear();
        return ckpt;
    }
    const LayerHessians hs = collect_hessians(ckpt, calibration);
    Checkpoint quant = ckpt;
    if (report) report->clear();
    for (const auto & [name, h] : hs.h) {
        const TensorF32 & w = ckpt.tensor(name);
        TensorF32 q = gptq_from_hessian(w, h, cfg);
        if (report) {
            QuantLayerReport lr;
            lr.name = name;
            lr.gptq_error = reconstruction_error(w, q, h);
            lr.rtn_error = reconstruction_error(w, rtn_quantize(w, cfg), h);
            report->push_back(std::move(lr));
        }
        quant.tensor(name) = std::move(q);
    }
    return quant;
}

} // namespace ltwin

#include "ltwin/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ltwin {

SimilarityMatrix similarity_matrix(const ActivationTrace & trace, std::optional<int> exclude_channel) {
    const int T = trace.n_layers;
    const int64_t d = trace.d_model;
    for (int layer = 0; layer <= T; ++layer)
        if (!trace.has({ProbeKind::residual_post_block, layer}))
            fail(ErrorKind::validation, "trace lacks residual probe for layer " + std::to_string(layer));
    if (exclude_channel && (*exclude_channel < 0 || *exclude_channel >= d))
        fail(ErrorKind::validation, "excluded channel out of range");

    SimilarityMatrix m;
    m.n_layers = T;
    m.excluded_channel = exclude_channel;
    const int P = T + 1;
    m.entries.assign(static_cast<size_t>(P * P), 0.0);

    // Precompute norms (with the excluded coordinate zeroed) per probe row.
    std::vector<std::vector<double>> norms(static_cast<size_t>(P));
    for (int layer = 0; layer <= T; ++layer) {
        const auto & data = trace.probes.at({ProbeKind::residual_post_block, layer});
        auto & nl = norms[static_cast<size_t>(layer)];
        nl.resize(static_cast<size_t>(trace.rows));
        for (int64_t r = 0; r < trace.rows; ++r) {
            const float * v = data.data() + r * d;
            double s = 0.0;
            for (int64_t c = 0; c < d; ++c) {
                if (exclude_channel && c == *exclude_channel) continue;
                s += static_cast<double>(v[c]) * static_cast<double>(v[c]);
            }
            nl[static_cast<size_t>(r)] = std::sqrt(s);
        }
    }

    std::vector<double> sums(static_cast<size_t>(P * P), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(P * P), 0);
    int64_t skipped = 0;
    int64_t used = 0;
    for (int64_t r = 0; r < trace.rows; ++r) {
        if (!trace.valid[static_cast<size_t>(r)]) continue;
        bool any_zero = false;
        for (int layer = 0; layer <= T; ++layer)
            if (norms[static_cast<size_t>(layer)][static_cast<size_t>(r)] == 0.0) any_zero = true;
        if (any_zero) {
            ++skipped;
            continue;
        }
        ++used;
        for (int i = 0; i <= T; ++i) {
            const float * hi = trace.probes.at({ProbeKind::residual_post_block, i}).data() + r * d;
            const double ni = norms[static_cast<size_t>(i)][static_cast<size_t>(r)];
            for (int j = i; j <= T; ++j) {
                const float * hj = trace.probes.at({ProbeKind::residual_post_block, j}).data() + r * d;
                double dot = 0.0;
                for (int64_t c = 0; c < d; ++c) {
                    if (exclude_channel && c == *exclude_channel) continue;
                    dot += static_cast<double>(hi[c]) * static_cast<double>(hj[c]);
                }
                const double cos = dot / (ni * norms[static_cast<size_t>(j)][static_cast<size_t>(r)]);
                sums[static_cast<size_t>(i * P + j)] += cos;
                counts[static_cast<size_t>(i * P + j)] += 1;
            }
        }
    }
    if (used == 0) fail(ErrorKind::insufficient_data, "similarity_matrix: every token was skipped");

    for (int i = 0; i <= T; ++i)
        for (int j = i; j <= T; ++j) {
            const double v =
                sums[static_cast<size_t>(i * P + j)] / static_cast<double>(counts[static_cast<size_t>(i * P + j)]);
            m.entries[static_cast<size_t>(i * P + j)] = v;
            m.entries[static_cast<size_t>(j * P + i)] = v;
        }
    m.tokens_used = used;
    m.zero_norm_skipped = skipped;
    return m;
}

ChannelProfile channel_profile(const ActivationTrace & trace, ProbeKind kind, int k) {
    if (k < 1) fail(ErrorKind::validation, "channel_profile requires k >= 1");
    const int T = trace.n_layers;
    const int64_t d = trace.d_model;
    if (k > d) fail(ErrorKind::validation, "channel_profile k exceeds d_model");
    const int first = kind == ProbeKind::residual_post_block ? 0 : 1;

    ChannelProfile profile;
    profile.kind = kind;
    profile.k = k;
    profile.first_layer = first;

    for (int layer = first; layer <= T; ++layer) {
        if (!trace.has({kind, layer}))
            fail(ErrorKind::validation,
                 "trace lacks " + to_string(kind) + " probe for layer " + std::to_string(layer));
        const auto & data = trace.probes.at({kind, layer});
        std::vector<double> mean_abs(static_cast<size_t>(d), 0.0);
        int64_t n = 0;
        for (int64_t r = 0; r < trace.rows; ++r) {
            if (!trace.valid[static_cast<size_t>(r)]) continue;
            const float * v = data.data() + r * d;
            for (int64_t c = 0; c < d; ++c) mean_abs[static_cast<size_t>(c)] += std::abs(static_cast<double>(v[c]));
            ++n;
        }
        if (n == 0) fail(ErrorKind::insufficient_data, "channel_profile: no valid tokens");
        for (double & v : mean_abs) v /= static_cast<double>(n);

        std::vector<int> idx(static_cast<size_t>(d));
        for (int64_t c = 0; c < d; ++c) idx[static_cast<size_t>(c)] = static_cast<int>(c);
        // descending score, ties by lower channel id
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            if (mean_abs[static_cast<size_t>(a)] != mean_abs[static_cast<size_t>(b)])
                return mean_abs[static_cast<size_t>(a)] > mean_abs[static_cast<size_t>(b)];
            return a < b;
        });
        std::vector<ChannelScore> top;
        for (int i = 0; i < k; ++i) top.push_back({idx[static_cast<size_t>(i)], mean_abs[static_cast<size_t>(idx[static_cast<size_t>(i)])]});
        profile.per_layer.push_back(std::move(top));
    }
    return profile;
}

OutlierReport detect_super_outlier(const ChannelProfile & profile, double ratio_threshold, double span_frac) {
    OutlierReport rep;
    rep.ratio_threshold = ratio_threshold;
    rep.span_frac = span_frac;
    const int n = static_cast<int>(profile.per_layer.size());
    if (n == 0) return rep;
    if (profile.k < 2) fail(ErrorKind::validation, "detect_super_outlier needs k >= 2 profiles");

    for (const auto & layer : profile.per_layer) {
        rep.argmax_channel.push_back(layer[0].channel);
        const double second = layer[1].score;
        rep.dominance_ratio.push_back(second > 0.0 ? layer[0].score / second
                                                   : (layer[0].score > 0.0 ? 1e300 : 1.0));
    }

    // longest consecutive run of one top-1 channel
    int best_start = 0, best_len = 0;
    int run_start = 0;
    for (int i = 1; i <= n; ++i) {
        if (i == n || rep.argmax_channel[static_cast<size_t>(i)] != rep.argmax_channel[static_cast<size_t>(run_start)]) {
            if (i - run_start > best_len) {
                best_len = i - run_start;
                best_start = run_start;
            }
            run_start = i;
        }
    }
    rep.dominant_channel = rep.argmax_channel[static_cast<size_t>(best_start)];
    rep.persistence = best_len;

    // Flag rule: the run restricted to the first half of the layers must cover
    // at least ceil(span_frac * T / 2) layers, all with ratio >= threshold.
    const int T = n; // profile covers layers first_layer..T
    const int half_end = T / 2; // layers (0-based indices) [0, half_end)
    const int need = static_cast<int>(std::ceil(span_frac * static_cast<double>(T) / 2.0));
    const int lo = best_start;
    const int hi = std::min(best_start + best_len, half_end);
    int covered = std::max(0, hi - lo);
    bool ratios_ok = covered > 0;
    for (int i = lo; i < hi; ++i)
        if (rep.dominance_ratio[static_cast<size_t>(i)] < ratio_threshold) ratios_ok = false;
    rep.super_outlier = covered >= need && ratios_ok;
    return rep;
}

std::pair<double, double> block_similarity(const SimilarityMatrix & m, const std::vector<int> & early_layers,
                                           const std::vector<int> & late_layers) {
    auto block_mean = [&m](const std::vector<int> & layers) {
        if (layers.empty()) fail(ErrorKind::validation, "block_similarity: empty block");
        double s = 0.0;
        for (int i : layers)
            for (int j : layers) {
                if (i < 0 || i > m.n_layers || j < 0 || j > m.n_layers)
                    fail(ErrorKind::validation, "block_similarity: layer index out of range");
                s += m.at(i, j);
            }
        return s / static_cast<double>(layers.size() * layers.size());
    };
    return {block_mean(early_layers), block_mean(late_layers)};
}

std::vector<ChannelProfile> step_profile(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration,
                                         const std::vector<double> & t_values, ProbeKind kind, int k,
                                         uint64_t seed) {
    if (ckpt.meta.objective != "mdlm") fail(ErrorKind::mode, "step_profile requires an mdlm checkpoint");
    std::vector<ProbePoint> captures;
    const int first = kind == ProbeKind::residual_post_block ? 0 : 1;
    for (int layer = first; layer <= ckpt.config.n_layers; ++layer) captures.push_back({kind, layer});

    std::vector<ChannelProfile> out;
    for (double t : t_values) {
        if (!(t >= 0.0 && t <= 1.0)) fail(ErrorKind::validation, "step_profile t out of [0,1]");
        MaskingConfig mc;
        mc.copies = 1;
        mc.seed = seed;
        const std::vector<double> forced{t};
        ActivationTrace trace = capture_trace(ckpt, calibration, mc, captures, {}, &forced);
        out.push_back(channel_profile(trace, kind, k));
    }
    return out;
}

void write_similarity_csv(const SimilarityMatrix & m, const std::string & path) {
    std::string csv;
    char buf[64];
    const int P = m.n_layers + 1;
    for (int i = 0; i < P; ++i) {
        for (int j = 0; j < P; ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", m.at(i, j));
            csv += buf;
            csv += (j + 1 < P) ? "," : "\n";
        }
    }
    write_file_atomic(path, csv.data(), csv.size());
}

SimilarityMatrix read_similarity_csv(const std::string & path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open " + path);
    SimilarityMatrix m;
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) fail(ErrorKind::io, path + ": empty similarity matrix");
    const size_t P = rows.size();
    for (const auto & row : rows)
        if (row.size() != P) fail(ErrorKind::io, path + ": similarity matrix is not square");
    m.n_layers = static_cast<int>(P) - 1;
    m.entries.resize(P * P);
    for (size_t i = 0; i < P; ++i)
        for (size_t j = 0; j < P; ++j) m.entries[i * P + j] = rows[i][j];
    return m;
}

nlohmann::ordered_json channel_profile_to_json(const ChannelProfile & p) {
    nlohmann::ordered_json j;
    j["probe_kind"] = to_string(p.kind);
    j["k"] = p.k;
    j["first_layer"] = p.first_layer;
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (size_t li = 0; li < p.per_layer.size(); ++li) {
        nlohmann::ordered_json layer;
        layer["layer"] = p.first_layer + static_cast<int>(li);
        nlohmann::ordered_json top = nlohmann::ordered_json::array();
        for (const auto & cs : p.per_layer[li]) {
            top.push_back({{"channel", cs.channel}, {"mean_abs_activation", cs.score}});
        }
        layer["top_channels"] = top;
        layers.push_back(layer);
    }
    j["layers"] = layers;
    return j;
}

nlohmann::ordered_json outlier_report_to_json(const OutlierReport & r) {
    nlohmann::ordered_json j;
    j["per_layer_argmax_channel"] = r.argmax_channel;
    j["dominance_ratio"] = r.dominance_ratio;
    j["dominant_channel"] = r.dominant_channel;
    j["persistence"] = r.persistence;
    j["super_outlier"] = r.super_outlier;
    j["ratio_threshold"] = r.ratio_threshold;
    j["span_frac"] = r.span_frac;
    return j;
}

} // namespace ltwin

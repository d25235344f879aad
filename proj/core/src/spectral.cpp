#include "ltwin/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace ltwin {

double hill_alpha(const EigenSpectrum & spectrum, int k) {
    const int64_t n = static_cast<int64_t>(spectrum.size());
    if (k < 1 || k >= n) fail(ErrorKind::validation, "hill_alpha requires 1 <= k < n");
    for (size_t i = 1; i < spectrum.values.size(); ++i)
        if (spectrum.values[i] < spectrum.values[i - 1])
            fail(ErrorKind::validation, "hill_alpha expects an ascending spectrum");
    const double xmin = spectrum.values[static_cast<size_t>(n - 1 - k)];
    if (!(xmin > 0.0)) fail(ErrorKind::degenerate_spectrum, "hill_alpha: threshold eigenvalue is zero");
    double s = 0.0;
    for (int i = 1; i <= k; ++i) s += std::log(spectrum.values[static_cast<size_t>(n - i)] / xmin);
    if (!(s > 0.0)) fail(ErrorKind::degenerate_spectrum, "hill_alpha: degenerate tail (all top-k at threshold)");
    return 1.0 + static_cast<double>(k) / s;
}

int fix_finger_k(const EigenSpectrum & spectrum) {
    // positive eigenvalues after the zero-clamp filter
    double lmax = 0.0;
    for (double v : spectrum.values) lmax = std::max(lmax, v);
    std::vector<double> pos;
    for (double v : spectrum.values)
        if (v > kSpectrumZeroRel * lmax) pos.push_back(v);
    std::sort(pos.begin(), pos.end());
    const int64_t n = static_cast<int64_t>(pos.size());
    if (n < 32) fail(ErrorKind::insufficient_data, "fix_finger_k needs at least 32 positive eigenvalues");

    const int bins = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const double lo = std::log(pos.front());
    const double hi = std::log(pos.back());
    std::vector<int64_t> count(static_cast<size_t>(bins), 0);
    std::vector<double> bin_min(static_cast<size_t>(bins), 0.0);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (double v : pos) {
        int b = width > 0.0 ? static_cast<int>((std::log(v) - lo) / width) : 0;
        b = std::clamp(b, 0, bins - 1);
        if (count[static_cast<size_t>(b)] == 0 || v < bin_min[static_cast<size_t>(b)])
            bin_min[static_cast<size_t>(b)] = v;
        count[static_cast<size_t>(b)] += 1;
    }
    int best = 0;
    for (int b = 1; b < bins; ++b)
        if (count[static_cast<size_t>(b)] > count[static_cast<size_t>(best)]) best = b; // ties -> leftmost
    const double xmin = bin_min[static_cast<size_t>(best)];

    int64_t k = 0;
    for (double v : pos)
        if (v > xmin) ++k;
    k = std::clamp<int64_t>(k, 10, n - 1);
    return static_cast<int>(k);
}

namespace {

MatrixSpectrum analyze_matrix(const std::string & name, const TensorF32 & w) {
    MatrixSpectrum ms;
    ms.name = name;
    try {
        const EigenSpectrum spec = gram_eigenvalues(w);
        double lmax = 0.0;
        for (double v : spec.values) lmax = std::max(lmax, v);
        EigenSpectrum pos;
        for (double v : spec.values)
            if (v > kSpectrumZeroRel * lmax) pos.values.push_back(v);
        ms.n_eigenvalues = static_cast<int64_t>(pos.values.size());
        ms.k = fix_finger_k(pos);
        ms.xmin = pos.values[pos.values.size() - 1 - static_cast<size_t>(ms.k)];
        ms.alpha_hill = hill_alpha(pos, ms.k);
    } catch (const Error & e) {
        ms.error = e.what();
    }
    return ms;
}

} // namespace

SpectrumReport layer_alpha(const Checkpoint & ckpt) {
    ckpt.validate();
    SpectrumReport report;
    static const char * kProjections[] = {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w_up", "mlp.w_down"};
    for (int layer = 0; layer < ckpt.config.n_layers; ++layer) {
        const std::string prefix = "blocks." + std::to_string(layer) + ".";
        LayerAlpha la;
        la.layer = layer;
        double sum = 0.0;
        for (const char * proj : kProjections) {
            MatrixSpectrum ms = analyze_matrix(prefix + proj, ckpt.tensor(prefix + proj));
            if (ms.alpha_hill) {
                sum += *ms.alpha_hill;
                ++la.matrices_used;
            }
            report.matrices.push_back(std::move(ms));
        }
        if (la.matrices_used > 0) la.mean_alpha = sum / static_cast<double>(la.matrices_used);
        report.layers.push_back(la);
    }
    report.extra.push_back(analyze_matrix("embed.weight", ckpt.tensor("embed.weight")));
    report.extra.push_back(analyze_matrix("lm_head.weight", ckpt.tensor("lm_head.weight")));
    return report;
}

nlohmann::ordered_json spectrum_report_to_json(const SpectrumReport & r) {
    nlohmann::ordered_json j;
    auto matrix_json = [](const MatrixSpectrum & ms) {
        nlohmann::ordered_json e;
        e["name"] = ms.name;
        e["n_eigenvalues"] = ms.n_eigenvalues;
        e["k"] = ms.k;
        e["xmin"] = ms.xmin;
        if (ms.alpha_hill)
            e["alpha_hill"] = *ms.alpha_hill;
        else
            e["alpha_hill"] = nullptr;
        if (!ms.error.empty()) e["error"] = ms.error;
        return e;
    };
    j["matrices"] = nlohmann::ordered_json::array();
    for (const auto & ms : r.matrices) j["matrices"].push_back(matrix_json(ms));
    j["layers"] = nlohmann::ordered_json::array();
    for (const auto & la : r.layers) {
        nlohmann::ordered_json e;
        e["layer"] = la.layer;
        if (la.mean_alpha)
            e["mean_alpha"] = *la.mean_alpha;
        else
            e["mean_alpha"] = nullptr;
        e["matrices_used"] = la.matrices_used;
        j["layers"].push_back(e);
    }
    j["extra"] = nlohmann::ordered_json::array();
    for (const auto & ms : r.extra) j["extra"].push_back(matrix_json(ms));
    return j;
}

SpectrumReport spectrum_report_from_json(const nlohmann::ordered_json & j) {
    SpectrumReport r;
    auto matrix_from = [](const nlohmann::ordered_json & e) {
        MatrixSpectrum ms;
        ms.name = e.at("name").get<std::string>();
        ms.n_eigenvalues = e.at("n_eigenvalues").get<int64_t>();
        ms.k = e.at("k").get<int>();
        ms.xmin = e.at("xmin").get<double>();
        if (!e.at("alpha_hill").is_null()) ms.alpha_hill = e.at("alpha_hill").get<double>();
        if (e.contains("error")) ms.error = e.at("error").get<std::string>();
        return ms;
    };
    for (const auto & e : j.at("matrices")) r.matrices.push_back(matrix_from(e));
    for (const auto & e : j.at("layers")) {
        LayerAlpha la;
        la.layer = e.at("layer").get<int>();
        if (!e.at("mean_alpha").is_null()) la.mean_alpha = e.at("mean_alpha").get<double>();
        la.matrices_used = e.at("matrices_used").get<int>();
        r.layers.push_back(la);
    }
    for (const auto & e : j.at("extra")) r.extra.push_back(matrix_from(e));
    return r;
}

void write_layer_alpha_csv(const SpectrumReport & r, const std::string & path) {
    std::string csv = "layer,mean_alpha\n";
    char buf[64];
    for (const auto & la : r.layers) {
        if (la.mean_alpha)
            std::snprintf(buf, sizeof(buf), "%d,%.17g\n", la.layer, *la.mean_alpha);
        else
            std::snprintf(buf, sizeof(buf), "%d,\n", la.layer);
        csv += buf;
    }
    write_file_atomic(path, csv.data(), csv.size());
}

} // namespace ltwin

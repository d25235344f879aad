#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ltwin/checkpoint.hpp"
#include "ltwin/tensor.hpp"

namespace ltwin {

struct MatrixSpectrum {
    std::string name;
    int64_t n_eigenvalues = 0; // positive eigenvalues used
    int k = 0;
    double xmin = 0.0;
    std::optional<double> alpha_hill; // absent when the tail is degenerate
    std::string error;                // diagnostic when alpha is absent
};

struct LayerAlpha {
    int layer = 0;                    // block index 0..T-1
    std::optional<double> mean_alpha; // mean over the six projection matrices
    int matrices_used = 0;
};

struct SpectrumReport {
    std::vector<MatrixSpectrum> matrices;
    std::vector<LayerAlpha> layers;
    std::vector<MatrixSpectrum> extra; // embedding / lm_head, excluded from layer means
};

// Hill tail-exponent estimate from the top-k eigenvalues of an ascending
// spectrum: 1 + k / sum_{i=1..k} ln(lambda_{n-i+1} / lambda_{n-k}).
double hill_alpha(const EigenSpectrum & spectrum, int k);

// Fix-finger k selection: histogram of ln(lambda) over positive eigenvalues
// with ceil(sqrt(n)) bins; xmin anchors at the smallest eigenvalue of the
// fullest bin; k = #eigenvalues strictly above xmin, clamped to [10, n-1].
int fix_finger_k(const EigenSpectrum & spectrum);

// Per-block mean alpha over wq, wk, wv, wo, w_up, w_down.
SpectrumReport layer_alpha(const Checkpoint & ckpt);

nlohmann::ordered_json spectrum_report_to_json(const SpectrumReport & r);
SpectrumReport spectrum_report_from_json(const nlohmann::ordered_json & j);
void write_layer_alpha_csv(const SpectrumReport & r, const std::string & path);

} // namespace ltwin

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ltwin/checkpoint.hpp"
#include "ltwin/corpus.hpp"
#include "ltwin/model.hpp"

namespace ltwin {

// Mean per-token cosine similarity between residual probes 0..T.
struct SimilarityMatrix {
    int n_layers = 0;                  // T; entries span probes 0..T
    std::vector<double> entries;       // (T+1) x (T+1), row-major
    std::string calibration;           // free-form description
    std::optional<int> excluded_channel;
    int64_t tokens_used = 0;
    int64_t zero_norm_skipped = 0;

    double at(int i, int j) const { return entries[static_cast<size_t>(i * (n_layers + 1) + j)]; }
};

struct ChannelScore {
    int channel = 0;
    double score = 0.0; // mean |activation| over valid tokens
};

struct ChannelProfile {
    ProbeKind kind = ProbeKind::qkv_input;
    int k = 5;
    int first_layer = 1;                              // 0 when residual probes include the embedding
    std::vector<std::vector<ChannelScore>> per_layer; // top-k, descending score
};

struct OutlierReport {
    std::vector<int> argmax_channel;     // per layer
    std::vector<double> dominance_ratio; // top1 / top2 per layer
    int dominant_channel = -1;
    int persistence = 0; // longest consecutive top-1 run of the dominant channel
    bool super_outlier = false;
    double ratio_threshold = 2.0;
    double span_frac = 0.5;
};

SimilarityMatrix similarity_matrix(const ActivationTrace & trace, std::optional<int> exclude_channel = {});

ChannelProfile channel_profile(const ActivationTrace & trace, ProbeKind kind, int k);

// Dominant channel = the per-layer top-1 channel with the longest consecutive
// run. Flagged when that run covers at least ceil(span_frac * T / 2) layers of
// the first half of the network with dominance ratio >= ratio_threshold
// throughout the covered span.
OutlierReport detect_super_outlier(const ChannelProfile & profile, double ratio_threshold = 2.0,
                                   double span_frac = 0.5);

// Mean over all ordered layer pairs inside each block, diagonal included
// (4-layer blocks give 16 terms).
std::pair<double, double> block_similarity(const SimilarityMatrix & m, const std::vector<int> & early_layers,
                                           const std::vector<int> & late_layers);

// One channel profile per mask fraction; t = 0 reproduces the unmasked profile.
std::vector<ChannelProfile> step_profile(const Checkpoint & ckpt, const std::vector<TokenSequence> & calibration,
                                         const std::vector<double> & t_values, ProbeKind kind, int k,
                                         uint64_t seed);

void write_similarity_csv(const SimilarityMatrix & m, const std::string & path);
SimilarityMatrix read_similarity_csv(const std::string & path);

nlohmann::ordered_json channel_profile_to_json(const ChannelProfile & p);
nlohmann::ordered_json outlier_report_to_json(const OutlierReport & r);

} // namespace ltwin

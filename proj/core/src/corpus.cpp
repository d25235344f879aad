#include "ltwin/corpus.hpp"

#include <algorithm>
#include <fstream>

#include "ltwin/rng.hpp"

namespace ltwin {

TokenSequence tokenize(std::string_view text) {
    TokenSequence seq;
    seq.ids.reserve(text.size() + 1);
    seq.ids.push_back(kBosId);
    for (unsigned char c : text) seq.ids.push_back(static_cast<int32_t>(c));
    seq.valid.assign(seq.ids.size(), 1);
    return seq;
}

std::string detokenize(const TokenSequence & seq) {
    std::string out;
    out.reserve(seq.ids.size());
    for (size_t i = 0; i < seq.ids.size(); ++i) {
        if (!seq.valid[i]) continue;
        const int32_t id = seq.ids[i];
        if (id >= 0 && id <= 255) out.push_back(static_cast<char>(id));
    }
    return out;
}

TokenSequence TokenBatch::row(int64_t r) const {
    TokenSequence seq;
    seq.ids.assign(tokens.begin() + r * seq_len, tokens.begin() + (r + 1) * seq_len);
    seq.valid.assign(valid.begin() + r * seq_len, valid.begin() + (r + 1) * seq_len);
    return seq;
}

std::vector<int32_t> load_corpus_tokens(const std::vector<std::string> & corpus_paths) {
    std::vector<std::string> paths = corpus_paths;
    std::sort(paths.begin(), paths.end());
    std::vector<int32_t> tokens;
    for (const auto & p : paths) {
        std::ifstream in(p, std::ios::binary);
        if (!in) fail(ErrorKind::io, "cannot open corpus file " + p);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        tokens.push_back(kBosId);
        for (unsigned char c : text) tokens.push_back(static_cast<int32_t>(c));
    }
    if (tokens.empty()) fail(ErrorKind::insufficient_data, "empty corpus");
    return tokens;
}

BatchStream::BatchStream(const std::vector<std::string> & corpus_paths, int64_t seq_len, int64_t batch_size,
                         uint64_t seed)
    : tokens_(load_corpus_tokens(corpus_paths)), seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
    if (seq_len_ <= 0 || batch_size_ <= 0) fail(ErrorKind::validation, "seq_len and batch_size must be positive");
    n_chunks_ = (static_cast<int64_t>(tokens_.size()) + seq_len_ - 1) / seq_len_;
    reshuffle();
}

void BatchStream::reshuffle() {
    order_.resize(static_cast<size_t>(n_chunks_));
    for (int64_t i = 0; i < n_chunks_; ++i) order_[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(seed_, static_cast<uint64_t>(epoch_)));
    for (int64_t i = n_chunks_ - 1; i > 0; --i) {
        const int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
        std::swap(order_[static_cast<size_t>(i)], order_[static_cast<size_t>(j)]);
    }
    cursor_ = 0;
}

TokenBatch BatchStream::next() {
    TokenBatch batch;
    batch.batch_size = batch_size_;
    batch.seq_len = seq_len_;
    batch.tokens.resize(static_cast<size_t>(batch_size_ * seq_len_), kPadId);
    batch.valid.assign(static_cast<size_t>(batch_size_ * seq_len_), 0);

    const int64_t total = static_cast<int64_t>(tokens_.size());
    for (int64_t r = 0; r < batch_size_; ++r) {
        if (cursor_ >= n_chunks_) {
            ++epoch_;
            reshuffle();
        }
        const int64_t chunk = order_[static_cast<size_t>(cursor_++)];
        const int64_t start = chunk * seq_len_;
        const int64_t len = std::min(seq_len_, total - start);
        for (int64_t i = 0; i < len; ++i) {
            batch.tokens[static_cast<size_t>(r * seq_len_ + i)] = tokens_[static_cast<size_t>(start + i)];
            batch.valid[static_cast<size_t>(r * seq_len_ + i)] = 1;
        }
    }
    hash_ = fnv1a_update(hash_, batch.tokens.data(), batch.tokens.size() * sizeof(int32_t));
    return batch;
}

std::vector<TokenSequence> sample_calibration(const std::vector<std::string> & corpus_paths, int64_t n_sequences,
                                              int64_t seq_len, uint64_t seed) {
    if (n_sequences < 0) fail(ErrorKind::validation, "n_sequences must be >= 0");
    if (n_sequences == 0) return {};
    std::vector<int32_t> tokens = load_corpus_tokens(corpus_paths);
    const int64_t total = static_cast<int64_t>(tokens.size());
    const int64_t n_chunks = (total + seq_len - 1) / seq_len;
    if (n_chunks < n_sequences)
        fail(ErrorKind::insufficient_data, "corpus yields " + std::to_string(n_chunks) + " chunks but " +
                                               std::to_string(n_sequences) + " were requested");

    // Partial Fisher-Yates: the first n_sequences entries are a uniform
    // draw without replacement.
    std::vector<int64_t> idx(static_cast<size_t>(n_chunks));
    for (int64_t i = 0; i < n_chunks; ++i) idx[static_cast<size_t>(i)] = i;
    Rng rng(seed);
    for (int64_t i = 0; i < n_sequences; ++i) {
        const int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n_chunks - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }

    std::vector<TokenSequence> out;
    out.reserve(static_cast<size_t>(n_sequences));
    for (int64_t s = 0; s < n_sequences; ++s) {
        const int64_t start = idx[static_cast<size_t>(s)] * seq_len;
        const int64_t len = std::min(seq_len, total - start);
        TokenSequence seq;
        seq.ids.assign(static_cast<size_t>(seq_len), kPadId);
        seq.valid.assign(static_cast<size_t>(seq_len), 0);
        for (int64_t i = 0; i < len; ++i) {
            seq.ids[static_cast<size_t>(i)] = tokens[static_cast<size_t>(start + i)];
            seq.valid[static_cast<size_t>(i)] = 1;
        }
        out.push_back(std::move(seq));
    }
    return out;
}

MaskedCopy apply_masking(const TokenSequence & seq, double t, int32_t mask_id, uint64_t seed) {
    if (!(t >= 0.0 && t <= 1.0)) fail(ErrorKind::validation, "mask fraction t must lie in [0,1]");
    if (mask_id < 0 || mask_id >= kVocabSize) fail(ErrorKind::validation, "mask_id out of vocabulary");
    MaskedCopy copy;
    copy.seq = seq;
    copy.t = t;
    copy.corrupted.assign(seq.ids.size(), 0);
    Rng rng(seed);
    for (size_t i = 0; i < seq.ids.size(); ++i) {
        if (!seq.valid[i] || seq.ids[i] == kBosId || seq.ids[i] == kPadId) continue;
        if (rng.uniform01() < t) {
            copy.seq.ids[i] = mask_id;
            copy.corrupted[i] = 1;
        }
    }
    return copy;
}

std::vector<MaskedCopy> make_masked_copies(const TokenSequence & seq, const MaskingConfig & cfg,
                                           const std::vector<double> * forced_t) {
    cfg.validate();
    if (forced_t && static_cast<int>(forced_t->size()) != cfg.copies)
        fail(ErrorKind::validation, "forced_t length must equal cfg.copies");
    std::vector<MaskedCopy> out;
    out.reserve(static_cast<size_t>(cfg.copies));
    Rng t_rng(derive_seed(cfg.seed, 0));
    for (int c = 0; c < cfg.copies; ++c) {
        double t;
        if (forced_t) {
            t = (*forced_t)[static_cast<size_t>(c)];
        } else if (c == 0 && cfg.unmasked_first_copy) {
            t = 0.0;
        } else {
            t = t_rng.uniform(cfg.t_min, 1.0);
        }
        out.push_back(apply_masking(seq, t, kMaskId, derive_seed(cfg.seed, 1 + static_cast<uint64_t>(c))));
    }
    return out;
}

} // namespace ltwin

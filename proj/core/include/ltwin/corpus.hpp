#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ltwin/error.hpp"

namespace ltwin {

// Byte-level vocabulary: raw bytes 0..255 plus three specials. MASK is never
// produced by tokenize, which realizes the "unused vocabulary slot" reuse.
inline constexpr int32_t kPadId = 256;
inline constexpr int32_t kBosId = 257;
inline constexpr int32_t kMaskId = 258;
inline constexpr int32_t kVocabSize = 259;

struct TokenSequence {
    std::vector<int32_t> ids;
    std::vector<uint8_t> valid; // false = padding; padding only at the tail

    size_t size() const { return ids.size(); }
};

struct MaskingConfig {
    int copies = 4;
    double t_min = 1e-3;
    uint64_t seed = 0;
    bool unmasked_first_copy = false; // no-mask protocol variant

    void validate() const {
        if (copies < 1) fail(ErrorKind::validation, "masking copies must be >= 1");
        if (!(t_min > 0.0 && t_min < 1.0)) fail(ErrorKind::validation, "t_min must lie in (0,1)");
    }
};

TokenSequence tokenize(std::string_view text);
std::string detokenize(const TokenSequence & seq);

// Fixed-length rows cut from the corpus: documents (files, lexicographic
// order) are tokenized and concatenated, each starting with its BOS.
struct TokenBatch {
    int64_t batch_size = 0;
    int64_t seq_len = 0;
    std::vector<int32_t> tokens; // [batch_size x seq_len]
    std::vector<uint8_t> valid;  // parallel to tokens

    TokenSequence row(int64_t r) const;
};

// Deterministic shuffled stream over the corpus chunks; reshuffles with a
// derived seed on every epoch so long runs can wrap around.
class BatchStream {
  public:
    BatchStream(const std::vector<std::string> & corpus_paths, int64_t seq_len, int64_t batch_size,
                uint64_t seed);

    TokenBatch next();
    int64_t chunk_count() const { return n_chunks_; }
    uint64_t stream_hash() const { return hash_; }

  private:
    void reshuffle();

    std::vector<int32_t> tokens_;
    int64_t seq_len_;
    int64_t batch_size_;
    uint64_t seed_;
    int64_t n_chunks_ = 0;
    int64_t epoch_ = 0;
    int64_t cursor_ = 0;
    std::vector<int64_t> order_;
    uint64_t hash_ = 0xcbf29ce484222325ULL;
};

// Loads and tokenizes the whole corpus (files in lexicographic order, BOS
// separators between documents).
std::vector<int32_t> load_corpus_tokens(const std::vector<std::string> & corpus_paths);

// Chunks the corpus like BatchStream and draws n_sequences distinct chunks
// uniformly without replacement.
std::vector<TokenSequence> sample_calibration(const std::vector<std::string> & corpus_paths, int64_t n_sequences,
                                              int64_t seq_len, uint64_t seed);

struct MaskedCopy {
    TokenSequence seq;              // corrupted sequence
    double t = 0.0;                 // mask fraction drawn for this copy
    std::vector<uint8_t> corrupted; // flags of positions replaced by mask_id
};

// Absorbing-state corruption: every non-padding, non-BOS position is
// independently replaced by mask_id with probability t.
MaskedCopy apply_masking(const TokenSequence & seq, double t, int32_t mask_id, uint64_t seed);

// cfg.copies corruptions of seq with t ~ Unif[t_min, 1] each; copy 0 is left
// unmasked when cfg.unmasked_first_copy is set. forced_t pins the t values
// (test hook and step-profile support).
std::vector<MaskedCopy> make_masked_copies(const TokenSequence & seq, const MaskingConfig & cfg,
                                           const std::vector<double> * forced_t = nullptr);

} // namespace ltwin

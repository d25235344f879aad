#pragma once

#include <cstdint>
#include <string>

namespace ltwin {

// Deterministic synthetic English-like corpus: Zipf-weighted syllabic
// vocabulary, templated grammar with number agreement and nested clauses,
// per-paragraph topics. Self-contained replacement for a web corpus so every
// experiment is reproducible offline.
std::string generate_text(uint64_t bytes, uint64_t seed);

void generate_text_corpus(const std::string & path, uint64_t bytes, uint64_t seed);

} // namespace ltwin

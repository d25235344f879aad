#include "ltwin/textgen.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ltwin/checkpoint.hpp"
#include "ltwin/rng.hpp"

namespace ltwin {

namespace {

struct Vocabulary {
    std::vector<std::string> nouns, verbs, adjectives, adverbs, names, preps, dets;
    std::vector<double> noun_cdf, verb_cdf, adj_cdf, adv_cdf;
};

std::string make_word(Rng & rng, int syllables) {
    static const char * onsets[] = {"b",  "br", "c",  "cl", "d",  "dr", "f",  "fl", "g",  "gr", "h",
                                    "j",  "k",  "l",  "m",  "n",  "p",  "pl", "pr", "r",  "s",  "sh",
                                    "sl", "sp", "st", "t",  "th", "tr", "v",  "w",  "wh", "z"};
    static const char * vowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "ee", "oo", "ou"};
    static const char * codas[] = {"", "", "", "b", "ck", "d", "g", "l", "ll", "m", "n", "nd",
                                   "ng", "nt", "p", "r", "rd", "rn", "s", "st", "t", "th"};
    std::string w;
    for (int s = 0; s < syllables; ++s) {
        w += onsets[rng.below(sizeof(onsets) / sizeof(onsets[0]))];
        w += vowels[rng.below(sizeof(vowels) / sizeof(vowels[0]))];
        if (s + 1 == syllables || rng.uniform01() < 0.35) w += codas[rng.below(sizeof(codas) / sizeof(codas[0]))];
    }
    return w;
}

std::vector<double> zipf_cdf(size_t n) {
    std::vector<double> cdf(n);
    double total = 0.0;
    for (size_t k = 0; k < n; ++k) {
        total += 1.0 / std::pow(static_cast<double>(k) + 2.7, 1.07);
        cdf[k] = total;
    }
    for (double & v : cdf) v /= total;
    return cdf;
}

size_t pick(Rng & rng, const std::vector<double> & cdf) {
    const double u = rng.uniform01();
    return static_cast<size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
}

Vocabulary build_vocabulary(uint64_t seed) {
    Rng rng(derive_seed(seed, 0x776f7264ULL));
    Vocabulary v;
    auto fill = [&rng](std::vector<std::string> & dst, size_t n, int min_syl, int max_syl) {
        while (dst.size() < n) {
            const int syl = min_syl + static_cast<int>(rng.below(static_cast<uint64_t>(max_syl - min_syl + 1)));
            std::string w = make_word(rng, syl);
            if (std::find(dst.begin(), dst.end(), w) == dst.end()) dst.push_back(w);
        }
    };
    fill(v.nouns, 600, 1, 3);
    fill(v.verbs, 300, 1, 2);
    fill(v.adjectives, 220, 1, 3);
    fill(v.adverbs, 90, 2, 3);
    fill(v.names, 80, 2, 3);
    for (auto & n : v.names) n[0] = static_cast<char>(std::toupper(n[0]));
    v.preps = {"of", "in", "on", "with", "under", "near", "through", "beyond", "against", "toward"};
    v.dets = {"the", "a", "this", "that", "every", "some", "no", "each"};
    v.noun_cdf = zipf_cdf(v.nouns.size());
    v.verb_cdf = zipf_cdf(v.verbs.size());
    v.adj_cdf = zipf_cdf(v.adjectives.size());
    v.adv_cdf = zipf_cdf(v.adverbs.size());
    return v;
}

struct Generator {
    const Vocabulary & v;
    Rng & rng;
    std::vector<size_t> topic_nouns; // per-paragraph restriction

    std::string noun(bool & plural) {
        plural = rng.uniform01() < 0.25;
        size_t idx;
        if (!topic_nouns.empty() && rng.uniform01() < 0.7) {
            idx = topic_nouns[rng.below(topic_nouns.size())];
        } else {
            idx = pick(rng, v.noun_cdf);
        }
        std::string w = v.nouns[idx];
        if (plural) w += "s";
        return w;
    }

    std::string noun_phrase(bool & plural, int depth) {
        if (rng.uniform01() < 0.12) {
            plural = false;
            return v.names[rng.below(v.names.size())];
        }
        std::string np = v.dets[rng.below(v.dets.size())];
        const int n_adj = rng.uniform01() < 0.4 ? 1 + static_cast<int>(rng.below(2)) : 0;
        for (int i = 0; i < n_adj; ++i) np += " " + v.adjectives[pick(rng, v.adj_cdf)];
        np += " " + noun(plural);
        if (depth < 2 && rng.uniform01() < 0.18) {
            bool p2 = false;
            np += " " + v.preps[rng.below(v.preps.size())] + " " + noun_phrase(p2, depth + 1);
        }
        return np;
    }

    std::string verb_phrase(bool subject_plural, int depth) {
        std::string vp;
        if (rng.uniform01() < 0.25) vp += v.adverbs[pick(rng, v.adv_cdf)] + " ";
        std::string verb = v.verbs[pick(rng, v.verb_cdf)];
        if (!subject_plural) verb += "s"; // agreement with the subject
        vp += verb;
        const double r = rng.uniform01();
        if (depth < 2 && r < 0.15) {
            vp += " that " + clause(depth + 1);
        } else if (r < 0.75) {
            bool p = false;
            vp += " " + noun_phrase(p, depth + 1);
            if (rng.uniform01() < 0.25) {
                bool p2 = false;
                vp += " " + v.preps[rng.below(v.preps.size())] + " " + noun_phrase(p2, depth + 1);
            }
        }
        return vp;
    }

    std::string clause(int depth) {
        bool plural = false;
        std::string s = noun_phrase(plural, depth);
        s += " " + verb_phrase(plural, depth);
        return s;
    }

    std::string sentence() {
        std::string s = clause(0);
        if (rng.uniform01() < 0.18) s += ", and " + clause(1);
        if (rng.uniform01() < 0.06) s += " " + std::to_string(1 + rng.below(9999));
        s[0] = static_cast<char>(std::toupper(s[0]));
        const double r = rng.uniform01();
        s += r < 0.86 ? "." : (r < 0.95 ? "?" : "!");
        return s;
    }
};

} // namespace

std::string generate_text(uint64_t bytes, uint64_t seed) {
    const Vocabulary vocab = build_vocabulary(seed);
    Rng rng(derive_seed(seed, 0x74657874ULL));
    Generator gen{vocab, rng, {}};

    std::string out;
    out.reserve(bytes + 256);
    while (out.size() < bytes) {
        // paragraph topic: a small noun subset keeps nearby sentences related
        gen.topic_nouns.clear();
        const size_t topic_size = 4 + rng.below(8);
        for (size_t i = 0; i < topic_size; ++i) gen.topic_nouns.push_back(pick(rng, vocab.noun_cdf));
        const int n_sentences = 3 + static_cast<int>(rng.below(6));
        for (int s = 0; s < n_sentences && out.size() < bytes; ++s) {
            out += gen.sentence();
            out += " ";
        }
        out += "\n\n";
    }
    out.resize(bytes);
    return out;
}

void generate_text_corpus(const std::string & path, uint64_t bytes, uint64_t seed) {
    const std::string text = generate_text(bytes, seed);
    write_file_atomic(path, text.data(), text.size());
}

} // namespace ltwin

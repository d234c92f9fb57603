#include "ssmg/textenc.hpp"

#include <cctype>
#include <cmath>

#include "ssmg/rng.hpp"

namespace ssmg {

uint64_t fnv1a64(const std::string& token) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : token) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace {

inline bool word_char(unsigned char c) {
    return std::isalnum(c) != 0 || c >= 0x80;
}

}  // namespace

std::vector<uint32_t> tokenize(const std::string& text, uint32_t vocab_size) {
    std::vector<uint32_t> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(static_cast<uint32_t>(fnv1a64(cur) % vocab_size));
            cur.clear();
        }
    };
    for (unsigned char c : text) {
        if (word_char(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
        }
    }
    flush();
    return out;
}

VocabTable::VocabTable(const VocabConfig& cfg) : cfg_(cfg) {
    table_.resize(static_cast<size_t>(cfg.size) * cfg.dim);
    Rng rng(cfg.seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    for (auto& v : table_) v = static_cast<float>(rng.gauss() * scale);
}

std::vector<float> VocabTable::embed(const std::string& text) const {
    std::vector<float> out(static_cast<size_t>(cfg_.dim), 0.0f);
    const auto tokens = tokenize(text, cfg_.size);
    if (tokens.empty()) return out;
    for (uint32_t t : tokens) {
        const float* r = row(t);
        for (int c = 0; c < cfg_.dim; ++c) out[static_cast<size_t>(c)] += r[c];
    }
    const float inv = 1.0f / static_cast<float>(tokens.size());
    for (auto& v : out) v *= inv;
    return out;
}

}  // namespace ssmg

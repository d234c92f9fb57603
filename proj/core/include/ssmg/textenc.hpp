#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmg/tensor.hpp"

namespace ssmg {

// FNV-1a 64-bit over the token bytes.
uint64_t fnv1a64(const std::string& token);

// Lowercases ASCII, splits on non-alphanumeric runs (bytes >= 0x80 count as
// word characters so UTF-8 words stay intact), hashes each token with FNV-1a
// and reduces modulo the vocab size. Empty text yields an empty list.
std::vector<uint32_t> tokenize(const std::string& text, uint32_t vocab_size);

struct VocabConfig {
    uint32_t size = 4096;
    int dim = 64;  // embedding channels C
    uint64_t seed = 0;
    bool operator==(const VocabConfig&) const = default;
};

// Frozen stand-in for a pre-trained text encoder. The table is fully
// determined by (size, dim, seed): rows drawn from mt19937_64 via Box-Muller,
// scaled by 1/sqrt(dim) so embedding norms are O(1) for any dim.
class VocabTable {
public:
    explicit VocabTable(const VocabConfig& cfg);

    const VocabConfig& config() const { return cfg_; }
    int dim() const { return cfg_.dim; }

    const float* row(uint32_t index) const { return &table_[static_cast<size_t>(index) * cfg_.dim]; }

    // Mean of the token rows; empty token list gives the all-zero (null)
    // embedding used for unconditional passes.
    std::vector<float> embed(const std::string& text) const;

    const std::vector<float>& raw_table() const { return table_; }

private:
    VocabConfig cfg_;
    std::vector<float> table_;  // size x dim
};

}  // namespace ssmg

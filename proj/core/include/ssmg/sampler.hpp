#pragma once

#include <cstdint>
#include <vector>

#include "ssmg/layout.hpp"
#include "ssmg/model.hpp"
#include "ssmg/textenc.hpp"

namespace ssmg {

// Branch input for one layout as a plain [C,H,W] tensor: the (optionally
// RSA-enhanced) map for map guidance, the color render for rgb guidance.
// Returns an empty tensor for branchless models.
Tensor precompute_branch_input(const Model& model, const VocabTable& vocab, const Layout& layout);

// Deterministic DDIM sampling (eta = 0). The seed fixes only the initial
// noise; each layout draws from its own seed stream.
std::vector<Tensor> ddim_sample_batch(const Model& model, const VocabTable& vocab,
                                      const std::vector<Layout>& layouts,
                                      const std::vector<uint64_t>& seeds, int steps,
                                      float cfg_scale);

Tensor ddim_sample(const Model& model, const VocabTable& vocab, const Layout& layout, int steps,
                   float cfg_scale, uint64_t seed);

}  // namespace ssmg

#pragma once

#include <cstdint>
#include <vector>

#include "ssmg/image.hpp"
#include "ssmg/layout.hpp"
#include "ssmg/tensor.hpp"
#include "ssmg/textenc.hpp"

namespace ssmg {

// H x W x C feature grid built from a layout: pixels covered by one entity
// hold that entity's text embedding, overlaps hold the mean of the covering
// entities' embeddings, uncovered pixels hold the zero vector. Coverage sets
// are kept as first-class data because relation building needs exact entity
// membership, which is not recoverable from averaged features.
struct SpatialSemanticMap {
    int h = 0, w = 0, c = 0;
    int n_entities = 0;
    Tensor feat;                    // [h, w, c]
    std::vector<uint64_t> coverage; // h*w bitmasks over entity ids

    uint64_t cov(int i, int j) const { return coverage[static_cast<size_t>(i) * w + j]; }
};

// Supports at most 64 entities per layout (coverage sets are bitmasks).
constexpr int kMaxMapEntities = 64;

SpatialSemanticMap init_map(const Layout& layout, int h, int w, const VocabTable& vocab);

// Average-pools features and union-pools coverage down to (h2, w2), which
// must divide the source shape. When the layout is still available, re-running
// init_map at the target resolution is the preferred (exact) path; see the
// module tests for the documented discrepancy between the two on partially
// covered blocks.
SpatialSemanticMap downsample_map(const SpatialSemanticMap& map, int h2, int w2);

// Fixed random projection of per-pixel features to RGB for inspection.
ImageU8 project_map_rgb(const SpatialSemanticMap& map, uint64_t seed = 0x55AA55AAull);

// Grayscale heatmap of per-pixel coverage counts.
ImageU8 coverage_heatmap(const SpatialSemanticMap& map);

}  // namespace ssmg

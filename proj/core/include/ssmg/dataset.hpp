#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ssmg/image.hpp"
#include "ssmg/layout.hpp"

namespace ssmg {

enum class RegionForm { Box, Mask, Keypoints };

struct GenConfig {
    int h = 32, w = 32;
    int min_entities = 1, max_entities = 5;
    RegionForm region_form = RegionForm::Box;
    int max_attempts = 100;    // full re-placements before RetryExhausted
    int place_tries = 60;      // position/size samples per entity per attempt
    int bg_noise = 10;         // uniform per-channel jitter on the background
    int fg_noise = 6;          // uniform per-channel jitter on object pixels
    double min_coverage = 0.02;
};

struct Scene {
    ImageU8 image;
    Layout layout;
    std::vector<int> color_ids;
    std::vector<int> shape_ids;
};

// Deterministic in seed. Entity classes are drawn once and kept across
// placement retries so rejection does not skew the class distribution.
// Every returned scene passes validate() cleanly and round-trips through
// detect() with correct classes and IoU >= 0.5 per entity.
Scene gen_scene(uint64_t seed, const GenConfig& cfg = {});

struct DatasetManifest {
    int n = 0;
    uint64_t seed = 0;
    std::vector<int> train_ids;
    std::vector<int> val_ids;
};

// Writes images/NNNNNN.png, layouts/NNNNNN.json and manifest.json under dir.
// Index i goes to the val split when i % 20 == 19 (5%).
DatasetManifest gen_dataset(int n, uint64_t seed, const std::filesystem::path& dir,
                            const GenConfig& cfg = {});

DatasetManifest load_manifest(const std::filesystem::path& dir);
Layout load_layout_file(const std::filesystem::path& path);
std::string scene_stem(int index);

}  // namespace ssmg

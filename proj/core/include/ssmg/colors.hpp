#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ssmg/layout.hpp"
#include "ssmg/tensor.hpp"

namespace ssmg {

struct PaletteColor {
    const char* name;
    uint8_t r, g, b;
};

// Shared object palette for the synthetic scenes, the rgb-guided render, and
// the detector.
const std::vector<PaletteColor>& palette();

// Background fill used by the scene generator.
inline constexpr std::array<uint8_t, 3> kBackgroundRgb = {38, 38, 38};

// Palette index of the first color word found in a description, or -1.
int find_color_word(const std::string& desc);

// Rasterizes every entity region filled with its named color onto the
// background, producing a [3,h,w] tensor in [-1,1]. Later entities paint over
// earlier ones where regions overlap. Entities without a recognized color
// word render white.
Tensor render_layout_rgb(const Layout& layout, int h, int w);

}  // namespace ssmg

#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "ssmg/errors.hpp"

namespace ssmg {

// Axis-aligned box in normalized [0,1] coordinates, x right, y down.
struct BoxRegion {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool operator==(const BoxRegion&) const = default;
};

// Binary raster; rasterization samples it with nearest-neighbor lookup.
struct MaskRegion {
    int h = 0, w = 0;
    std::vector<uint8_t> grid;  // h*w, values 0/1
    bool operator==(const MaskRegion&) const = default;
};

// Union of discs of one radius around each point, normalized coordinates.
struct KeypointsRegion {
    std::vector<std::pair<double, double>> pts;  // (x, y)
    double radius = 0;
    bool operator==(const KeypointsRegion&) const = default;
};

using Region = std::variant<BoxRegion, MaskRegion, KeypointsRegion>;

struct Entity {
    int id = 0;
    std::string desc;
    Region region;
    bool operator==(const Entity&) const = default;
};

struct Layout {
    std::vector<Entity> entities;
    std::string global_desc;
    int canvas_h = 0;
    int canvas_w = 0;
    bool operator==(const Layout&) const = default;
};

// Binary coverage raster at a requested resolution.
struct CoverageMask {
    int h = 0, w = 0;
    std::vector<uint8_t> grid;  // h*w, values 0/1

    CoverageMask() = default;
    CoverageMask(int h_, int w_) : h(h_), w(w_), grid(static_cast<size_t>(h_) * w_, 0) {}
    uint8_t& at(int i, int j) { return grid[static_cast<size_t>(i) * w + j]; }
    uint8_t at(int i, int j) const { return grid[static_cast<size_t>(i) * w + j]; }
    int count() const {
        int n = 0;
        for (uint8_t v : grid) n += v;
        return n;
    }
    bool operator==(const CoverageMask&) const = default;
};

struct LayoutIssue {
    enum class Severity { Warning, Error };
    Severity severity;
    int entity_id;  // -1 for layout-level issues
    std::string message;
};

struct ParseOptions {
    int max_entities = 8;
};

// Parses and validates a layout document. Boxes extending past [0,1] are
// clamped; a note is appended to `issues` when provided.
Layout parse_layout(const std::string& json_bytes, const ParseOptions& opts = {},
                    std::vector<LayoutIssue>* issues = nullptr);

std::string serialize_layout(const Layout& layout);

// Pixel (i,j) is covered iff its center ((j+0.5)/w, (i+0.5)/h) lies inside the
// region. Throws EmptyCoverage when no pixel is covered.
CoverageMask rasterize(const Region& region, int h, int w);

// Per-entity checks at resolution (h,w): zero coverage is an error, coverage
// below 2% of the canvas a warning. Empty result means clean.
std::vector<LayoutIssue> validate(const Layout& layout, int h, int w);

}  // namespace ssmg

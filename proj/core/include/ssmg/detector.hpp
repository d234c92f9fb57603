#pragma once

#include <string>
#include <vector>

#include "ssmg/image.hpp"
#include "ssmg/layout.hpp"

namespace ssmg {

inline constexpr int kNumShapes = 3;
// Shape ids: 0 circle, 1 square, 2 triangle.
const char* shape_name(int shape_id);
int find_shape_word(const std::string& desc);

struct Detection {
    int color_id = -1;
    int shape_id = -1;
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // normalized xyxy
    double score = 0;                       // color-match quality in (0,1]
};

struct GroundTruth {
    int color_id = -1;
    int shape_id = -1;
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

// Closed-form detector: nearest-palette pixel classification under a
// distance threshold, 4-connected components of at least 5 pixels, shape
// from the bounding-box fill ratio, tight box, score = mean color match.
std::vector<Detection> detect(const ImageU8& img);

// Pixel distance threshold used by the detector.
inline constexpr double kColorTau = 80.0;

// Classes and tight boxes from a layout: class words parsed from each
// description, box from the rasterized coverage at canvas resolution.
std::vector<GroundTruth> layout_ground_truth(const Layout& layout);

double box_iou(double ax0, double ay0, double ax1, double ay1, double bx0, double by0, double bx1,
               double by1);

}  // namespace ssmg

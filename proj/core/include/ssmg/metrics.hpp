#pragma once

#include <vector>

#include "ssmg/detector.hpp"
#include "ssmg/image.hpp"

namespace ssmg {

struct EvalSample {
    std::vector<Detection> dets;
    std::vector<GroundTruth> gts;
};

struct YoloScore {
    double map = 0;
    double map50 = 0;
    double map75 = 0;
};

// COCO-style average precision: greedy score-ordered IoU matching per class,
// 101-point interpolation, thresholds 0.5:0.05:0.95, averaged over classes
// present in the ground truth.
YoloScore yolo_score(const std::vector<EvalSample>& samples);

// Mean AP across GT-present classes at one IoU threshold.
double map_at_iou(const std::vector<EvalSample>& samples, double thr);

// Mean absolute pixel difference in [0,1].
double diversity_score(const ImageU8& a, const ImageU8& b);

}  // namespace ssmg

#include "ssmg/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "ssmg/colors.hpp"
#include "ssmg/errors.hpp"

namespace ssmg {

namespace {

int class_id(int color, int shape) { return color * kNumShapes + shape; }

struct ClassDet {
    int sample = 0;
    double score = 0;
    double x0, y0, x1, y1;
};

// AP for one class at one threshold via greedy matching and 101-point
// interpolation.
double class_ap(const std::vector<EvalSample>& samples, int cls, double thr) {
    std::vector<ClassDet> dets;
    int64_t n_gt = 0;
    for (size_t s = 0; s < samples.size(); ++s) {
        for (const auto& g : samples[s].gts)
            if (class_id(g.color_id, g.shape_id) == cls) ++n_gt;
        for (const auto& d : samples[s].dets)
            if (class_id(d.color_id, d.shape_id) == cls)
                dets.push_back({static_cast<int>(s), d.score, d.x0, d.y0, d.x1, d.y1});
    }
    if (n_gt == 0) return -1.0;
    std::stable_sort(dets.begin(), dets.end(), [](const ClassDet& a, const ClassDet& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.sample != b.sample) return a.sample < b.sample;
        return a.x0 < b.x0;
    });

    std::vector<std::vector<uint8_t>> matched(samples.size());
    for (size_t s = 0; s < samples.size(); ++s)
        matched[s].assign(samples[s].gts.size(), 0);

    std::vector<uint8_t> tp(dets.size(), 0);
    for (size_t i = 0; i < dets.size(); ++i) {
        const auto& d = dets[i];
        const auto& gts = samples[static_cast<size_t>(d.sample)].gts;
        double best_iou = 0;
        int best_j = -1;
        for (size_t j = 0; j < gts.size(); ++j) {
            const auto& g = gts[j];
            if (class_id(g.color_id, g.shape_id) != cls) continue;
            if (matched[static_cast<size_t>(d.sample)][j]) continue;
            double iou = box_iou(d.x0, d.y0, d.x1, d.y1, g.x0, g.y0, g.x1, g.y1);
            if (iou > best_iou) {
                best_iou = iou;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0 && best_iou >= thr) {
            tp[i] = 1;
            matched[static_cast<size_t>(d.sample)][static_cast<size_t>(best_j)] = 1;
        }
    }

    std::vector<double> precision(dets.size()), recall(dets.size());
    int64_t tp_cum = 0;
    for (size_t i = 0; i < dets.size(); ++i) {
        tp_cum += tp[i];
        precision[i] = static_cast<double>(tp_cum) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp_cum) / static_cast<double>(n_gt);
    }

    double ap = 0;
    for (int r = 0; r <= 100; ++r) {
        double rr = r / 100.0;
        double best_p = 0;
        for (size_t i = 0; i < dets.size(); ++i)
            if (recall[i] >= rr) best_p = std::max(best_p, precision[i]);
        ap += best_p;
    }
    return ap / 101.0;
}

}  // namespace

double map_at_iou(const std::vector<EvalSample>& samples, double thr) {
    int n_classes = static_cast<int>(palette().size()) * kNumShapes;
    double sum = 0;
    int count = 0;
    for (int c = 0; c < n_classes; ++c) {
        double ap = class_ap(samples, c, thr);
        if (ap < 0) continue;
        sum += ap;
        ++count;
    }
    return count > 0 ? sum / count : 0.0;
}

YoloScore yolo_score(const std::vector<EvalSample>& samples) {
    if (samples.empty()) throw ValueError("yolo_score: need at least one sample");
    YoloScore s;
    double sum = 0;
    for (int i = 0; i < 10; ++i) {
        double thr = 0.5 + 0.05 * i;
        double m = map_at_iou(samples, thr);
        sum += m;
        if (i == 0) s.map50 = m;
        if (i == 5) s.map75 = m;
    }
    s.map = sum / 10.0;
    return s;
}

double diversity_score(const ImageU8& a, const ImageU8& b) {
    if (a.h != b.h || a.w != b.w) throw ShapeError("diversity_score: size mismatch");
    double sum = 0;
    for (size_t i = 0; i < a.rgb.size(); ++i)
        sum += std::abs(static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i]));
    return a.rgb.empty() ? 0.0 : sum / (255.0 * static_cast<double>(a.rgb.size()));
}

}  // namespace ssmg

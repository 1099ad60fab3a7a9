#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "advpatch/core.hpp"

namespace advpatch {

inline double iou(const BBox& a, const BBox& b) {
    double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

constexpr double kDefaultIouThresh = 0.45;

struct MapResult {
    bool has_ground_truth = false;  // false -> mAP undefined, not zero
    double map = 0.0;               // mean AP over classes with >= 1 GT, in [0,1]
    std::map<int, double> per_class_ap;
};

namespace detail {

struct ScoredMatch {
    double score;
    bool matched;
    size_t order;  // original rank for deterministic sorting
};

// AP by all-point interpolation (area under the precision-recall curve).
inline double average_precision(std::vector<ScoredMatch> dets, int num_gt) {
    if (num_gt == 0) return 0.0;
    std::sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.order < b.order;
    });
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const auto& d : dets) {
        d.matched ? ++tp : ++fp;
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / num_gt);
    }
    // Monotone envelope, then integrate over recall steps.
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
        precision[static_cast<size_t>(i)] =
            std::max(precision[static_cast<size_t>(i)],
                     precision[static_cast<size_t>(i) + 1]);
    double ap = 0.0, prev_r = 0.0;
    for (size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_r) * precision[i];
        prev_r = recall[i];
    }
    return ap;
}

}  // namespace detail

// Per class: detections sorted by objectness, greedy one-to-one matching to
// ground truth at IoU >= iou_thresh, AP from the resulting PR curve. Ties in
// matching go to the higher-IoU pair, then the earlier GT index.
inline MapResult compute_map(const std::vector<DetectionSet>& preds,
                             const std::vector<GroundTruth>& gts,
                             double iou_thresh = kDefaultIouThresh) {
    if (preds.size() != gts.size())
        throw ContractError("compute_map: preds/gts size mismatch");

    std::map<int, int> gt_counts;
    for (const auto& gt : gts)
        for (const auto& g : gt) ++gt_counts[g.class_id];

    MapResult res;
    if (gt_counts.empty()) return res;  // has_ground_truth stays false
    res.has_ground_truth = true;

    std::map<int, std::vector<detail::ScoredMatch>> per_class;
    for (size_t img = 0; img < preds.size(); ++img) {
        // Sort detections by score per class, then match greedily.
        std::map<int, std::vector<const Detection*>> by_class;
        for (const auto& d : preds[img].detections)
            by_class[d.class_id].push_back(&d);
        for (auto& [cls, dets] : by_class) {
            std::stable_sort(dets.begin(), dets.end(),
                             [](const Detection* a, const Detection* b) {
                                 return a->objectness > b->objectness;
                             });
            std::vector<bool> used(gts[img].size(), false);
            for (const Detection* d : dets) {
                int best_gt = -1;
                double best_iou = -1.0;
                for (size_t g = 0; g < gts[img].size(); ++g) {
                    if (used[g] || gts[img][g].class_id != cls) continue;
                    double v = iou(d->box, gts[img][g].box);
                    if (v >= iou_thresh && v > best_iou) {
                        best_iou = v;
                        best_gt = static_cast<int>(g);
                    }
                }
                bool matched = best_gt >= 0;
                if (matched) used[static_cast<size_t>(best_gt)] = true;
                per_class[cls].push_back(
                    {d->objectness, matched, per_class[cls].size()});
            }
        }
    }

    double sum = 0.0;
    int classes = 0;
    for (const auto& [cls, count] : gt_counts) {
        auto it = per_class.find(cls);
        double ap = detail::average_precision(
            it == per_class.end() ? std::vector<detail::ScoredMatch>{} : it->second,
            count);
        res.per_class_ap[cls] = ap;
        sum += ap;
        ++classes;
    }
    res.map = sum / classes;
    return res;
}

}  // namespace advpatch

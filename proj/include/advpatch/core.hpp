#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "advpatch/common.hpp"

namespace advpatch {

// RGB image with pixels in [0,1], interleaved row-major (r,c,channel).
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // height*width*3
    std::string source_id;

    Image() = default;
    Image(int h, int w, double fill = 0.0, std::string id = "")
        : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, fill),
          source_id(std::move(id)) {}

    double& at(int r, int c, int ch) {
        return pixels[(static_cast<size_t>(r) * width + c) * 3 + ch];
    }
    double at(int r, int c, int ch) const {
        return pixels[(static_cast<size_t>(r) * width + c) * 3 + ch];
    }
    size_t size() const { return pixels.size(); }
};

struct PatchMeta {
    std::uint64_t seed = 0;
    double lambda_tv = 0.0;
    std::vector<std::string> surrogate_ids;
    int epochs_trained = 0;
    std::string config_digest;

    bool operator==(const PatchMeta& o) const {
        return seed == o.seed && lambda_tv == o.lambda_tv &&
               surrogate_ids == o.surrogate_ids &&
               epochs_trained == o.epochs_trained &&
               config_digest == o.config_digest;
    }
};

// The optimization variable: a square learnable pixel grid, values in [0,1].
struct Patch {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // height*width*3, same layout as Image
    PatchMeta meta;

    Patch() = default;
    Patch(int side, double fill = 0.0)
        : height(side), width(side),
          pixels(static_cast<size_t>(side) * side * 3, fill) {}

    double& at(int r, int c, int ch) {
        return pixels[(static_cast<size_t>(r) * width + c) * 3 + ch];
    }
    double at(int r, int c, int ch) const {
        return pixels[(static_cast<size_t>(r) * width + c) * 3 + ch];
    }
    size_t size() const { return pixels.size(); }

    double mean() const {
        double s = 0.0;
        for (double v : pixels) s += v;
        return pixels.empty() ? 0.0 : s / static_cast<double>(pixels.size());
    }
};

constexpr int kMinPatchSide = 8;
constexpr int kDefaultPatchSide = 300;

enum class PatchInit { Gray, Random, White };

inline PatchInit patch_init_from_string(const std::string& s) {
    if (s == "gray") return PatchInit::Gray;
    if (s == "random") return PatchInit::Random;
    if (s == "white") return PatchInit::White;
    throw ConfigError("unknown patch init mode: " + s);
}

inline Patch init_patch(int side, PatchInit mode, std::uint64_t seed) {
    if (side < kMinPatchSide)
        throw ConfigError("patch side must be >= " +
                          std::to_string(kMinPatchSide) + ", got " +
                          std::to_string(side));
    Patch p(side);
    p.meta.seed = seed;
    switch (mode) {
        case PatchInit::Gray:
            std::fill(p.pixels.begin(), p.pixels.end(), 0.5);
            break;
        case PatchInit::White:
            std::fill(p.pixels.begin(), p.pixels.end(), 1.0);
            break;
        case PatchInit::Random: {
            Rng rng(seed);
            for (double& v : p.pixels) v = rng.unit();
            break;
        }
    }
    return p;
}

// Projects every pixel back into [0,1]. Idempotent.
inline Patch clamp_patch(Patch p) {
    for (double& v : p.pixels) v = clamp01(v);
    return p;
}

inline void clamp_patch_inplace(Patch& p) {
    for (double& v : p.pixels) v = clamp01(v);
}

// Axis-aligned box in pixel units, x1 < x2 and y1 < y2.
struct BBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    BBox() = default;
    BBox(double x1_, double y1_, double x2_, double y2_)
        : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
        if (!(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
              std::isfinite(y2)))
            throw ContractError("bbox coordinates must be finite");
        if (!(x1 < x2 && y1 < y2))
            throw ContractError("bbox requires x1 < x2 and y1 < y2");
    }

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
};

// One detector prediction. class_scores are pre-softmax logits; class_id is
// enforced to be their argmax at construction.
struct Detection {
    BBox box;
    int class_id = 0;
    double objectness = 0.0;
    std::vector<double> class_scores;

    // Detector-internal provenance (grid cell index) used to route gradients
    // back through the forward pass. -1 for detections without one.
    int cell_index = -1;

    Detection() = default;
    Detection(BBox b, int cls, double obj, std::vector<double> scores,
              int cell = -1)
        : box(b), class_id(cls), objectness(obj),
          class_scores(std::move(scores)), cell_index(cell) {
        if (objectness < 0.0 || objectness > 1.0)
            throw ContractError("objectness must lie in [0,1]");
        if (class_scores.empty())
            throw ContractError("class_scores must be non-empty");
        auto it = std::max_element(class_scores.begin(), class_scores.end());
        int argmax = static_cast<int>(it - class_scores.begin());
        if (class_id != argmax)
            throw ContractError("class_id must equal argmax(class_scores)");
    }
};

struct DetectionSet {
    std::vector<Detection> detections;
    std::string image_id;

    bool empty() const { return detections.empty(); }
    size_t size() const { return detections.size(); }
};

// One labeled ground-truth object.
struct GtInstance {
    BBox box;
    int class_id = 0;
};

using GroundTruth = std::vector<GtInstance>;

}  // namespace advpatch

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "advpatch/common.hpp"
#include "advpatch/core.hpp"

namespace advpatch {

// Scene-level augmentation simulating physical variability: horizontal flip,
// small-angle rotation, HSV color jitter, random scale crop (resized back).
struct AugmentSpec {
    double flip_prob = 0.5;
    double rotation_max = 5.0;  // degrees
    double hue_jitter = 0.02;
    double saturation_jitter = 0.2;
    double value_jitter = 0.2;
    double crop_scale_lo = 0.8;
    double crop_scale_hi = 1.0;

    void validate() const {
        if (flip_prob < 0.0 || flip_prob > 1.0)
            throw ConfigError("augment.flip_prob must lie in [0,1]");
        if (rotation_max < 0.0 || rotation_max > 15.0)
            throw ConfigError("augment.rotation_max must lie in [0,15]");
        if (hue_jitter < 0.0 || saturation_jitter < 0.0 || value_jitter < 0.0)
            throw ConfigError("augment jitters must be >= 0");
        if (!(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi &&
              crop_scale_hi <= 1.0))
            throw ConfigError("augment.crop_scale range must satisfy 0 < lo <= hi <= 1");
    }

    bool is_identity() const {
        return flip_prob == 0.0 && rotation_max == 0.0 && hue_jitter == 0.0 &&
               saturation_jitter == 0.0 && value_jitter == 0.0 &&
               crop_scale_lo == 1.0 && crop_scale_hi == 1.0;
    }
};

namespace detail {

inline double sample_bilinear(const Image& img, double x, double y, int ch) {
    // x, y in pixel-center coordinates; clamp to edge.
    x = std::max(0.0, std::min(x, img.width - 1.0));
    y = std::max(0.0, std::min(y, img.height - 1.0));
    int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    int x1 = std::min(x0 + 1, img.width - 1);
    int y1 = std::min(y0 + 1, img.height - 1);
    double fx = x - x0, fy = y - y0;
    return img.at(y0, x0, ch) * (1 - fx) * (1 - fy) +
           img.at(y0, x1, ch) * fx * (1 - fy) +
           img.at(y1, x0, ch) * (1 - fx) * fy + img.at(y1, x1, ch) * fx * fy;
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s,
                       double& v) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    double d = mx - mn;
    s = mx == 0.0 ? 0.0 : d / mx;
    if (d == 0.0) {
        h = 0.0;
    } else if (mx == r) {
        h = std::fmod((g - b) / d, 6.0) / 6.0;
    } else if (mx == g) {
        h = ((b - r) / d + 2.0) / 6.0;
    } else {
        h = ((r - g) / d + 4.0) / 6.0;
    }
    if (h < 0.0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g,
                       double& b) {
    double hh = h * 6.0;
    int i = static_cast<int>(hh) % 6;
    double f = hh - std::floor(hh);
    double p = v * (1.0 - s);
    double q = v * (1.0 - s * f);
    double t = v * (1.0 - s * (1.0 - f));
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

}  // namespace detail

inline Image flip_horizontal(const Image& x) {
    Image out = x;
    for (int r = 0; r < x.height; ++r)
        for (int c = 0; c < x.width; ++c)
            for (int ch = 0; ch < 3; ++ch)
                out.at(r, c, ch) = x.at(r, x.width - 1 - c, ch);
    return out;
}

// Output shape always equals input shape; identity spec returns x bitwise.
inline Image augment(const Image& x, const AugmentSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    Image out = x;

    if (spec.flip_prob > 0.0 && rng.bernoulli(spec.flip_prob))
        out = flip_horizontal(out);

    if (spec.rotation_max > 0.0) {
        double angle = rng.uniform(-spec.rotation_max, spec.rotation_max);
        double rad = angle * M_PI / 180.0;
        double cs = std::cos(rad), sn = std::sin(rad);
        double cx = 0.5 * (out.width - 1), cy = 0.5 * (out.height - 1);
        Image rot = out;
        for (int r = 0; r < out.height; ++r)
            for (int c = 0; c < out.width; ++c) {
                double dx = c - cx, dy = r - cy;
                double sx = cx + cs * dx + sn * dy;
                double sy = cy - sn * dx + cs * dy;
                for (int ch = 0; ch < 3; ++ch)
                    rot.at(r, c, ch) = detail::sample_bilinear(out, sx, sy, ch);
            }
        out = std::move(rot);
    }

    if (spec.hue_jitter > 0.0 || spec.saturation_jitter > 0.0 ||
        spec.value_jitter > 0.0) {
        double dh = spec.hue_jitter > 0.0
                        ? rng.uniform(-spec.hue_jitter, spec.hue_jitter)
                        : 0.0;
        double fs = spec.saturation_jitter > 0.0
                        ? rng.uniform(1.0 - spec.saturation_jitter,
                                      1.0 + spec.saturation_jitter)
                        : 1.0;
        double fv = spec.value_jitter > 0.0
                        ? rng.uniform(1.0 - spec.value_jitter,
                                      1.0 + spec.value_jitter)
                        : 1.0;
        for (int r = 0; r < out.height; ++r)
            for (int c = 0; c < out.width; ++c) {
                double h, s, v;
                detail::rgb_to_hsv(out.at(r, c, 0), out.at(r, c, 1),
                                   out.at(r, c, 2), h, s, v);
                h = std::fmod(h + dh + 1.0, 1.0);
                s = clamp01(s * fs);
                v = clamp01(v * fv);
                double rr, gg, bb;
                detail::hsv_to_rgb(h, s, v, rr, gg, bb);
                out.at(r, c, 0) = clamp01(rr);
                out.at(r, c, 1) = clamp01(gg);
                out.at(r, c, 2) = clamp01(bb);
            }
    }

    if (spec.crop_scale_lo < 1.0 || spec.crop_scale_hi < 1.0) {
        double f = rng.uniform(spec.crop_scale_lo, spec.crop_scale_hi);
        int cw = std::max(2, static_cast<int>(f * out.width));
        int chh = std::max(2, static_cast<int>(f * out.height));
        int x0 = rng.uniform_int(0, out.width - cw);
        int y0 = rng.uniform_int(0, out.height - chh);
        Image crop = out;
        double fx = static_cast<double>(cw) / out.width;
        double fy = static_cast<double>(chh) / out.height;
        for (int r = 0; r < out.height; ++r)
            for (int c = 0; c < out.width; ++c) {
                double sx = x0 + (c + 0.5) * fx - 0.5;
                double sy = y0 + (r + 0.5) * fy - 0.5;
                for (int ch = 0; ch < 3; ++ch)
                    crop.at(r, c, ch) = detail::sample_bilinear(out, sx, sy, ch);
            }
        out = std::move(crop);
    }

    for (double& v : out.pixels) v = clamp01(v);
    return out;
}

}  // namespace advpatch

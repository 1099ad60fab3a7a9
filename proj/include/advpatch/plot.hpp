#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "advpatch/core.hpp"
#include "advpatch/png_io.hpp"

namespace advpatch {

// Minimal raster plotting for run artifacts (loss curves, mAP bars).

namespace detail {

inline void fill_rect(Image& img, int r0, int c0, int r1, int c1,
                      const double rgb[3]) {
    r0 = std::max(0, r0);
    c0 = std::max(0, c0);
    r1 = std::min(img.height, r1);
    c1 = std::min(img.width, c1);
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c)
            for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = rgb[ch];
}

inline void draw_line(Image& img, double r0, double c0, double r1, double c1,
                      const double rgb[3]) {
    int steps = static_cast<int>(std::max(std::abs(r1 - r0), std::abs(c1 - c0))) + 1;
    for (int s = 0; s <= steps; ++s) {
        double t = static_cast<double>(s) / steps;
        int r = static_cast<int>(std::lround(r0 + t * (r1 - r0)));
        int c = static_cast<int>(std::lround(c0 + t * (c1 - c0)));
        if (r < 0 || r >= img.height || c < 0 || c >= img.width) continue;
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = rgb[ch];
    }
}

}  // namespace detail

inline void plot_loss_curve(const std::vector<double>& values,
                            const std::string& path, int width = 640,
                            int height = 360) {
    Image img(height, width, 1.0);
    const double axis[3] = {0.2, 0.2, 0.2};
    const double line[3] = {0.1, 0.3, 0.8};
    int margin = 24;
    detail::draw_line(img, height - margin, margin, height - margin,
                      width - margin, axis);
    detail::draw_line(img, margin, margin, height - margin, margin, axis);
    if (values.size() < 2) {
        write_png(path, img);
        return;
    }
    double lo = *std::min_element(values.begin(), values.end());
    double hi = *std::max_element(values.begin(), values.end());
    if (hi - lo < 1e-12) hi = lo + 1.0;
    auto to_rc = [&](size_t i, double v, double& r, double& c) {
        c = margin + (width - 2.0 * margin) * i / (values.size() - 1);
        r = height - margin - (height - 2.0 * margin) * (v - lo) / (hi - lo);
    };
    double pr, pc;
    to_rc(0, values[0], pr, pc);
    for (size_t i = 1; i < values.size(); ++i) {
        double r, c;
        to_rc(i, values[i], r, c);
        detail::draw_line(img, pr, pc, r, c, line);
        pr = r;
        pc = c;
    }
    write_png(path, img);
}

// Grouped bars, one group per label, values on a 0..100 scale.
inline void plot_bar_groups(const std::vector<std::string>& group_labels,
                            const std::vector<std::vector<double>>& groups,
                            const std::string& path, int width = 640,
                            int height = 360) {
    Image img(height, width, 1.0);
    const double axis[3] = {0.2, 0.2, 0.2};
    static const double palette[5][3] = {{0.20, 0.45, 0.80},
                                         {0.85, 0.30, 0.25},
                                         {0.55, 0.55, 0.55},
                                         {0.35, 0.70, 0.35},
                                         {0.80, 0.65, 0.20}};
    int margin = 24;
    detail::draw_line(img, height - margin, margin, height - margin,
                      width - margin, axis);
    detail::draw_line(img, margin, margin, height - margin, margin, axis);
    if (groups.empty()) {
        write_png(path, img);
        return;
    }
    size_t nbars = 0;
    for (const auto& g : groups) nbars = std::max(nbars, g.size());
    double group_w =
        (width - 2.0 * margin) / static_cast<double>(group_labels.size());
    double bar_w = group_w / (nbars + 1.0);
    for (size_t g = 0; g < groups.size(); ++g) {
        for (size_t b = 0; b < groups[g].size(); ++b) {
            double v = std::max(0.0, std::min(100.0, groups[g][b]));
            int top = static_cast<int>(height - margin -
                                       (height - 2.0 * margin) * v / 100.0);
            int c0 = static_cast<int>(margin + g * group_w + b * bar_w);
            int c1 = static_cast<int>(c0 + bar_w * 0.9);
            detail::fill_rect(img, top, c0, height - margin, c1,
                              palette[b % 5]);
        }
    }
    write_png(path, img);
}

}  // namespace advpatch

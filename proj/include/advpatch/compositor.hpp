#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "advpatch/common.hpp"
#include "advpatch/core.hpp"
#include "json.hpp"

namespace advpatch {

// How the patch is placed on detected objects.
struct PlacementSpec {
    double relative_scale = 0.3;   // patch side = round(r * sqrt(box area))
    double rotation_range = 20.0;  // degrees, sampled in [-range, range]
    double brightness_jitter = 0.1;
    double contrast_jitter = 0.1;
    int target_class = -1;  // -1: place on every detection

    void validate() const {
        if (!(relative_scale > 0.0 && relative_scale <= 1.0))
            throw ConfigError("placement.relative_scale must lie in (0,1]");
        if (rotation_range < 0.0 || rotation_range > 45.0)
            throw ConfigError("placement.rotation_range must lie in [0,45]");
        if (brightness_jitter < 0.0 || contrast_jitter < 0.0)
            throw ConfigError("placement jitters must be >= 0");
    }
};

// Training-time patch occlusion.
struct CutoutSpec {
    double p_crop = 0.5;
    double side_fraction_lo = 0.1;
    double side_fraction_hi = 0.3;
    enum class Fill { Zero, PatchMean };
    Fill fill_mode = Fill::PatchMean;

    void validate() const {
        if (p_crop < 0.0 || p_crop > 1.0)
            throw ConfigError("cutout.p_crop must lie in [0,1]");
        if (!(side_fraction_lo > 0.0 && side_fraction_lo <= side_fraction_hi &&
              side_fraction_hi < 1.0))
            throw ConfigError("cutout.side_fraction range must satisfy 0 < lo <= hi < 1");
    }
};

inline CutoutSpec::Fill cutout_fill_from_string(const std::string& s) {
    if (s == "zero") return CutoutSpec::Fill::Zero;
    if (s == "patch_mean") return CutoutSpec::Fill::PatchMean;
    throw ConfigError("unknown cutout fill mode: " + s);
}

// Sampled transformation, recorded exactly as applied so it can be replayed.
struct TransformParams {
    double angle = 0.0;            // degrees
    double scale = 1.0;            // footprint side / patch side
    double brightness_delta = 0.0;
    double contrast_factor = 1.0;
    bool cutout_applied = false;
    int cutout_row = 0, cutout_col = 0;
    int cutout_side = 0;
    double cutout_fill = 0.0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"angle", angle},
                              {"scale", scale},
                              {"brightness_delta", brightness_delta},
                              {"contrast_factor", contrast_factor},
                              {"cutout_applied", cutout_applied},
                              {"cutout_origin", {cutout_row, cutout_col}},
                              {"cutout_side", cutout_side},
                              {"cutout_fill", cutout_fill}};
    }
    static TransformParams from_json(const nlohmann::json& j) {
        TransformParams t;
        t.angle = j.at("angle").get<double>();
        t.scale = j.at("scale").get<double>();
        t.brightness_delta = j.at("brightness_delta").get<double>();
        t.contrast_factor = j.at("contrast_factor").get<double>();
        t.cutout_applied = j.at("cutout_applied").get<bool>();
        t.cutout_row = j.at("cutout_origin")[0].get<int>();
        t.cutout_col = j.at("cutout_origin")[1].get<int>();
        t.cutout_side = j.at("cutout_side").get<int>();
        t.cutout_fill = j.at("cutout_fill").get<double>();
        return t;
    }
};

// With probability p_crop, overwrite one axis-aligned square fully inside the
// patch with a constant. Never mutates the input patch.
inline std::pair<Patch, TransformParams> cutout_patch(const Patch& p,
                                                      const CutoutSpec& spec,
                                                      std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    TransformParams t;
    if (!rng.bernoulli(spec.p_crop)) return {p, t};

    double f = rng.uniform(spec.side_fraction_lo, spec.side_fraction_hi);
    int side = static_cast<int>(std::lround(f * p.width));
    side = std::max(1, std::min(side, p.width));
    int row = rng.uniform_int(0, p.height - side);
    int col = rng.uniform_int(0, p.width - side);
    double fill =
        spec.fill_mode == CutoutSpec::Fill::Zero ? 0.0 : p.mean();

    Patch out = p;
    for (int r = row; r < row + side; ++r)
        for (int c = col; c < col + side; ++c)
            for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = fill;

    t.cutout_applied = true;
    t.cutout_row = row;
    t.cutout_col = col;
    t.cutout_side = side;
    t.cutout_fill = fill;
    return {std::move(out), t};
}

// Routes a gradient w.r.t. the cutout output back to the original patch.
inline void cutout_backward(const TransformParams& t, CutoutSpec::Fill fill_mode,
                            std::vector<double>& d_patch, int height, int width) {
    if (!t.cutout_applied) return;
    double mean_contrib = 0.0;
    for (int r = t.cutout_row; r < t.cutout_row + t.cutout_side; ++r)
        for (int c = t.cutout_col; c < t.cutout_col + t.cutout_side; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                size_t i = (static_cast<size_t>(r) * width + c) * 3 + ch;
                mean_contrib += d_patch[i];
                d_patch[i] = 0.0;
            }
    if (fill_mode == CutoutSpec::Fill::PatchMean) {
        // Fill value is the patch mean, so its gradient spreads uniformly.
        double per_pixel = mean_contrib / (3.0 * height * width);
        for (double& v : d_patch) v += per_pixel;
    }
}

namespace detail {

struct PlacementSite {
    double cx = 0.0, cy = 0.0;
    int side = 0;  // footprint side in pixels, >= 1
};

inline std::vector<PlacementSite> placement_sites(const std::vector<BBox>& boxes,
                                                  const PlacementSpec& spec) {
    std::vector<PlacementSite> sites;
    for (const auto& b : boxes) {
        int side = static_cast<int>(
            std::lround(spec.relative_scale * std::sqrt(b.area())));
        if (side < 1) continue;  // degenerate placement is a no-op
        sites.push_back({b.cx(), b.cy(), side});
    }
    return sites;
}

// Bilinear patch sample at continuous patch coordinates (u, v) measured from
// the patch's top-left corner; pixel centers sit at half-integers.
inline double sample_patch(const Patch& p, double u, double v, int ch) {
    double x = std::max(0.0, std::min(u - 0.5, p.width - 1.0));
    double y = std::max(0.0, std::min(v - 0.5, p.height - 1.0));
    int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    int x1 = std::min(x0 + 1, p.width - 1);
    int y1 = std::min(y0 + 1, p.height - 1);
    double fx = x - x0, fy = y - y0;
    return p.at(y0, x0, ch) * (1 - fx) * (1 - fy) +
           p.at(y0, x1, ch) * fx * (1 - fy) + p.at(y1, x0, ch) * (1 - fx) * fy +
           p.at(y1, x1, ch) * fx * fy;
}

// Visits every output pixel covered by one placement. The callback receives
// (row, col, u, v) with (u, v) the patch coordinates of the pixel center.
template <typename Fn>
inline void for_each_footprint_pixel(const Image& img, const PlacementSite& site,
                                     const TransformParams& t, int patch_w,
                                     int patch_h, Fn&& fn) {
    double rad = t.angle * M_PI / 180.0;
    double cs = std::cos(rad), sn = std::sin(rad);
    double half_extent = 0.5 * site.side * (std::abs(cs) + std::abs(sn));
    int r0 = std::max(0, static_cast<int>(std::floor(site.cy - half_extent)));
    int r1 = std::min(img.height - 1,
                      static_cast<int>(std::ceil(site.cy + half_extent)));
    int c0 = std::max(0, static_cast<int>(std::floor(site.cx - half_extent)));
    int c1 = std::min(img.width - 1,
                      static_cast<int>(std::ceil(site.cx + half_extent)));
    for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
            double dx = c + 0.5 - site.cx;
            double dy = r + 0.5 - site.cy;
            // Inverse rotation, then scale back to patch units.
            double px = (cs * dx + sn * dy) / t.scale + 0.5 * patch_w;
            double py = (-sn * dx + cs * dy) / t.scale + 0.5 * patch_h;
            if (px >= 0.0 && px < patch_w && py >= 0.0 && py < patch_h)
                fn(r, c, px, py);
        }
    }
}

}  // namespace detail

// Detections eligible for placement under the spec's class filter.
inline std::vector<BBox> compositor_target_boxes(const DetectionSet& dets,
                                                 const PlacementSpec& spec) {
    std::vector<BBox> out;
    for (const auto& d : dets.detections)
        if (spec.target_class < 0 || d.class_id == spec.target_class)
            out.push_back(d.box);
    return out;
}

// Applies recorded params deterministically; bitwise-equal to the original
// place_patch output on the same inputs. Later placements overwrite earlier.
inline Image apply_placements(const Image& x, const std::vector<BBox>& boxes,
                              const Patch& p, const PlacementSpec& spec,
                              const std::vector<TransformParams>& params) {
    auto sites = detail::placement_sites(boxes, spec);
    if (sites.size() != params.size())
        throw ContractError("placement params/boxes count mismatch: " +
                            std::to_string(params.size()) + " vs " +
                            std::to_string(sites.size()));
    Image out = x;
    for (size_t i = 0; i < sites.size(); ++i) {
        const auto& t = params[i];
        detail::for_each_footprint_pixel(
            out, sites[i], t, p.width, p.height,
            [&](int r, int c, double px, double py) {
                for (int ch = 0; ch < 3; ++ch) {
                    double v = detail::sample_patch(p, px, py, ch);
                    out.at(r, c, ch) =
                        clamp01(t.contrast_factor * v + t.brightness_delta);
                }
            });
    }
    return out;
}

inline std::vector<TransformParams> sample_placement_params(
    const std::vector<BBox>& boxes, const Patch& p, const PlacementSpec& spec,
    std::uint64_t seed) {
    auto sites = detail::placement_sites(boxes, spec);
    Rng rng(seed);
    std::vector<TransformParams> params;
    for (const auto& site : sites) {
        TransformParams t;
        t.scale = static_cast<double>(site.side) / p.width;
        t.angle = spec.rotation_range > 0.0
                      ? rng.uniform(-spec.rotation_range, spec.rotation_range)
                      : 0.0;
        t.brightness_delta =
            spec.brightness_jitter > 0.0
                ? rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
                : 0.0;
        t.contrast_factor =
            spec.contrast_jitter > 0.0
                ? rng.uniform(1.0 - spec.contrast_jitter,
                              1.0 + spec.contrast_jitter)
                : 1.0;
        params.push_back(t);
    }
    return params;
}

struct PlacementResult {
    Image image;
    std::vector<TransformParams> params;
};

// The adversarial application operator: scales the patch to each target
// detection (side = round(r * sqrt(box area))), rotates, photometrically
// jitters and opaquely blends it centered on the box. Pixels outside all
// footprints are bitwise-identical to x. Empty detections return x unchanged.
inline PlacementResult place_patch(const Image& x, const DetectionSet& dets,
                                   const Patch& p, const PlacementSpec& spec,
                                   std::uint64_t seed) {
    spec.validate();
    auto boxes = compositor_target_boxes(dets, spec);
    auto params = sample_placement_params(boxes, p, spec, seed);
    return {apply_placements(x, boxes, p, spec, params), std::move(params)};
}

inline PlacementResult place_on_boxes(const Image& x,
                                      const std::vector<BBox>& boxes,
                                      const Patch& p, const PlacementSpec& spec,
                                      std::uint64_t seed) {
    spec.validate();
    auto params = sample_placement_params(boxes, p, spec, seed);
    return {apply_placements(x, boxes, p, spec, params), std::move(params)};
}

inline Image replay(const Image& x, const DetectionSet& dets, const Patch& p,
                    const PlacementSpec& spec,
                    const std::vector<TransformParams>& params) {
    return apply_placements(x, compositor_target_boxes(dets, spec), p, spec,
                            params);
}

// Chain rule through apply_placements: scatters dL/d(composited image) back to
// dL/d(patch pixels). Recomputes footprint ownership (last placement wins) so
// overlapping placements route gradients to the placement actually visible.
inline std::vector<double> placement_backward(
    const Image& x, const std::vector<BBox>& boxes, const Patch& p,
    const PlacementSpec& spec, const std::vector<TransformParams>& params,
    const Image& d_image) {
    auto sites = detail::placement_sites(boxes, spec);
    if (sites.size() != params.size())
        throw ContractError("placement params/boxes count mismatch");

    std::vector<int> owner(static_cast<size_t>(x.height) * x.width, -1);
    for (size_t i = 0; i < sites.size(); ++i)
        detail::for_each_footprint_pixel(
            x, sites[i], params[i], p.width, p.height,
            [&](int r, int c, double, double) {
                owner[static_cast<size_t>(r) * x.width + c] =
                    static_cast<int>(i);
            });

    std::vector<double> d_patch(p.size(), 0.0);
    for (size_t i = 0; i < sites.size(); ++i) {
        const auto& t = params[i];
        detail::for_each_footprint_pixel(
            x, sites[i], t, p.width, p.height,
            [&](int r, int c, double px, double py) {
                if (owner[static_cast<size_t>(r) * x.width + c] !=
                    static_cast<int>(i))
                    return;
                double ux = std::max(0.0, std::min(px - 0.5, p.width - 1.0));
                double uy = std::max(0.0, std::min(py - 0.5, p.height - 1.0));
                int x0 = static_cast<int>(ux), y0 = static_cast<int>(uy);
                int x1 = std::min(x0 + 1, p.width - 1);
                int y1 = std::min(y0 + 1, p.height - 1);
                double fx = ux - x0, fy = uy - y0;
                for (int ch = 0; ch < 3; ++ch) {
                    double v = detail::sample_patch(p, px, py, ch);
                    double pre = t.contrast_factor * v + t.brightness_delta;
                    if (pre <= 0.0 || pre >= 1.0) continue;  // clamp saturated
                    double g = d_image.at(r, c, ch) * t.contrast_factor;
                    if (g == 0.0) continue;
                    auto idx = [&](int rr, int cc) {
                        return (static_cast<size_t>(rr) * p.width + cc) * 3 +
                               static_cast<size_t>(ch);
                    };
                    d_patch[idx(y0, x0)] += g * (1 - fx) * (1 - fy);
                    d_patch[idx(y0, x1)] += g * fx * (1 - fy);
                    d_patch[idx(y1, x0)] += g * (1 - fx) * fy;
                    d_patch[idx(y1, x1)] += g * fx * fy;
                }
            });
    }
    return d_patch;
}

}  // namespace advpatch

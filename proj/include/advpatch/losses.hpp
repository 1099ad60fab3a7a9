#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "advpatch/augmentation.hpp"
#include "advpatch/common.hpp"
#include "advpatch/compositor.hpp"
#include "advpatch/core.hpp"
#include "advpatch/detector.hpp"

namespace advpatch {

constexpr double kTvFloor = 0.1;
constexpr double kObjKeepThreshold = 0.1;

// How L_obj and L_cls combine into the detection term of the objective.
enum class LossCoupling {
    Product,   // L_obj * L_cls
    Additive,  // L_obj + L_cls
    ObjOnly,   // L_obj (classification loss removed)
};

inline LossCoupling coupling_from_string(const std::string& s) {
    if (s == "product") return LossCoupling::Product;
    if (s == "additive") return LossCoupling::Additive;
    if (s == "obj_only") return LossCoupling::ObjOnly;
    throw ConfigError("unknown loss coupling: " + s);
}

struct LossBreakdown {
    double l_obj = 0.0;
    double l_cls = 0.0;
    double l_tv = 0.0;  // post-floor, normalized
    double l_total = 0.0;
    std::vector<std::pair<std::string, double>> per_model;
};

// Mean objectness over detections surviving the attack-target filter
// (target class when >= 0, objectness above the keep threshold). Zero when
// nothing survives: the attack has nothing left to suppress.
inline double obj_loss(const DetectionSet& dets, int target_class = -1,
                       double keep_threshold = kObjKeepThreshold) {
    double sum = 0.0;
    int n = 0;
    for (const auto& d : dets.detections) {
        if (target_class >= 0 && d.class_id != target_class) continue;
        if (d.objectness <= keep_threshold) continue;
        sum += d.objectness;
        ++n;
    }
    return n == 0 ? 0.0 : sum / n;
}

// Cross-entropy -log softmax(f)_target on raw logits.
inline double cls_loss(const std::vector<double>& logits, int target_class) {
    if (logits.size() < 2) throw ContractError("cls_loss needs C >= 2");
    if (target_class < 0 || target_class >= static_cast<int>(logits.size()))
        throw ContractError("cls_loss target out of range");
    double mx = logits[0];
    for (double v : logits) {
        if (!std::isfinite(v)) throw NumericError("non-finite class logit");
        mx = std::max(mx, v);
    }
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return -(logits[static_cast<size_t>(target_class)] - mx - std::log(z));
}

inline std::vector<double> cls_loss_grad(const std::vector<double>& logits,
                                         int target_class) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    std::vector<double> g(logits.size());
    for (size_t k = 0; k < logits.size(); ++k) {
        g[k] = std::exp(logits[k] - mx) / z;
        if (static_cast<int>(k) == target_class) g[k] -= 1.0;
    }
    return g;
}

// Raw total variation: sum of |right - here| + |below - here| over all valid
// neighbor pairs and all 3 channels.
inline double tv_loss_raw(const Patch& p) {
    double tv = 0.0;
    for (int r = 0; r < p.height; ++r)
        for (int c = 0; c < p.width; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                if (c + 1 < p.width)
                    tv += std::abs(p.at(r, c + 1, ch) - p.at(r, c, ch));
                if (r + 1 < p.height)
                    tv += std::abs(p.at(r + 1, c, ch) - p.at(r, c, ch));
            }
    return tv;
}

inline double tv_normalizer(const Patch& p) {
    return 3.0 * p.height * p.width;
}

// Normalized TV with a lower bound: max(raw / (3*H*W), floor). The gradient
// is zero once the raw value sits below the floor.
inline double tv_loss(const Patch& p, double floor = kTvFloor) {
    if (floor < 0.0) throw ConfigError("tv floor must be >= 0");
    return std::max(tv_loss_raw(p) / tv_normalizer(p), floor);
}

inline std::vector<double> tv_loss_grad(const Patch& p, double floor = kTvFloor) {
    std::vector<double> g(p.size(), 0.0);
    double norm = tv_normalizer(p);
    if (tv_loss_raw(p) / norm < floor) return g;  // below floor: flat
    auto idx = [&](int r, int c, int ch) {
        return (static_cast<size_t>(r) * p.width + c) * 3 +
               static_cast<size_t>(ch);
    };
    for (int r = 0; r < p.height; ++r)
        for (int c = 0; c < p.width; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                if (c + 1 < p.width) {
                    double d = p.at(r, c + 1, ch) - p.at(r, c, ch);
                    double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                    g[idx(r, c + 1, ch)] += s / norm;
                    g[idx(r, c, ch)] -= s / norm;
                }
                if (r + 1 < p.height) {
                    double d = p.at(r + 1, c, ch) - p.at(r, c, ch);
                    double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                    g[idx(r + 1, c, ch)] += s / norm;
                    g[idx(r, c, ch)] -= s / norm;
                }
            }
    return g;
}

// ---------------------------------------------------------------------------
// Full objective over an ensemble, with gradient w.r.t. patch pixels.
// ---------------------------------------------------------------------------

struct AttackSpecs {
    AugmentSpec augment;
    PlacementSpec placement;
    CutoutSpec cutout;
    bool cutout_enabled = true;
    LossCoupling coupling = LossCoupling::Product;
    double tv_floor = kTvFloor;
    double obj_keep_threshold = kObjKeepThreshold;
};

// Everything the pipeline sampled or selected for one (model, image) pass,
// recorded so the loss can be re-evaluated as a pure function of the patch.
struct FrozenPass {
    Image augmented;
    std::vector<BBox> boxes;            // placement targets (filtered)
    TransformParams cutout;
    std::vector<TransformParams> placements;
    std::vector<int> cells;             // selected detector cells
    std::vector<int> cls_targets;       // y_c per selected detection
};

struct FrozenTrace {
    std::vector<std::vector<FrozenPass>> passes;  // [model][image]
};

struct TotalLossResult {
    LossBreakdown breakdown;
    std::vector<double> d_patch;  // gradient w.r.t. patch pixels
    FrozenTrace trace;
};

inline Patch apply_cutout_params(const Patch& p, const TransformParams& t) {
    if (!t.cutout_applied) return p;
    Patch out = p;
    for (int r = t.cutout_row; r < t.cutout_row + t.cutout_side; ++r)
        for (int c = t.cutout_col; c < t.cutout_col + t.cutout_side; ++c)
            for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = t.cutout_fill;
    return out;
}

namespace detail {

struct ModelAccum {
    double obj_sum = 0.0;
    double cls_sum = 0.0;
    int n = 0;
};

// Per-detection contributions under the configured coupling.
inline double detection_term(LossCoupling coupling, double l_obj, double l_cls) {
    switch (coupling) {
        case LossCoupling::Product: return l_obj * l_cls;
        case LossCoupling::Additive: return l_obj + l_cls;
        case LossCoupling::ObjOnly: return l_obj;
    }
    return 0.0;
}

}  // namespace detail

// Runs the attack pipeline for every model and image: augment -> surrogate
// detection -> cutout -> placement -> re-detection, then assembles
// L_m = det_term_m + lambda_tv * L_tv and the ensemble sum over alphas.
// The gradient treats sampled params and the detection selection as fixed
// (straight-through), which is exactly the function frozen_total_loss
// evaluates.
inline TotalLossResult total_loss(const Patch& patch,
                                  const std::vector<const Image*>& batch,
                                  const std::vector<const DetectorAdapter*>& adapters,
                                  const std::vector<double>& alphas,
                                  const AttackSpecs& specs, double lambda_tv,
                                  std::uint64_t seed) {
    if (adapters.empty()) throw ConfigError("total_loss needs >= 1 adapter");
    if (alphas.size() != adapters.size())
        throw ContractError("alphas/adapters size mismatch");
    if (lambda_tv < 0.0) throw ConfigError("lambda_tv must be >= 0");

    const size_t M = adapters.size(), B = batch.size();
    // Fixed draw order so results do not depend on evaluation order.
    Rng master(seed);
    std::vector<std::uint64_t> aug_seeds(B), cut_seeds(B);
    std::vector<std::vector<std::uint64_t>> place_seeds(B,
                                                        std::vector<std::uint64_t>(M));
    for (size_t i = 0; i < B; ++i) {
        aug_seeds[i] = master.next_seed();
        cut_seeds[i] = master.next_seed();
        for (size_t m = 0; m < M; ++m) place_seeds[i][m] = master.next_seed();
    }

    TotalLossResult res;
    res.d_patch.assign(patch.size(), 0.0);
    res.trace.passes.resize(M);

    // Shared per-image preprocessing.
    std::vector<Image> augmented;
    augmented.reserve(B);
    for (size_t i = 0; i < B; ++i)
        augmented.push_back(augment(*batch[i], specs.augment, aug_seeds[i]));

    std::vector<Patch> cut_patches;
    std::vector<TransformParams> cut_params;
    for (size_t i = 0; i < B; ++i) {
        if (specs.cutout_enabled) {
            auto [pc, t] = cutout_patch(patch, specs.cutout, cut_seeds[i]);
            cut_patches.push_back(std::move(pc));
            cut_params.push_back(t);
        } else {
            cut_patches.push_back(patch);
            cut_params.push_back(TransformParams{});
        }
    }

    double weighted_det_term = 0.0;
    double obj_all = 0.0, cls_all = 0.0;
    int tracked_models = 0;

    double l_tv = tv_loss(patch, specs.tv_floor);
    std::vector<double> tv_grad = tv_loss_grad(patch, specs.tv_floor);

    for (size_t m = 0; m < M; ++m) {
        const DetectorAdapter& det = *adapters[m];
        if (!det.supports_gradients())
            throw ContractError("surrogate " + det.model_id() +
                                " is not gradient-capable");
        detail::ModelAccum acc;
        struct PassState {
            DetectionSet dets;
            GradHandle handle;
            std::vector<size_t> kept;  // indices into dets of surviving dets
        };
        std::vector<PassState> states(B);
        res.trace.passes[m].resize(B);

        for (size_t i = 0; i < B; ++i) {
            FrozenPass& fp = res.trace.passes[m][i];
            fp.augmented = augmented[i];
            fp.cutout = cut_params[i];

            DetectionSet clean_dets;
            try {
                clean_dets = det.detect(augmented[i]);
            } catch (const std::exception& e) {
                throw ContractError("adapter " + det.model_id() +
                                    " failed: " + e.what());
            }
            fp.boxes = compositor_target_boxes(clean_dets, specs.placement);
            fp.placements = sample_placement_params(fp.boxes, cut_patches[i],
                                                    specs.placement,
                                                    place_seeds[i][m]);
            Image adv = apply_placements(augmented[i], fp.boxes, cut_patches[i],
                                         specs.placement, fp.placements);

            auto [adv_dets, handle] = det.detect_with_grads(adv);
            PassState& ps = states[i];
            ps.dets = std::move(adv_dets);
            ps.handle = std::move(handle);
            for (size_t d = 0; d < ps.dets.detections.size(); ++d) {
                const Detection& dd = ps.dets.detections[d];
                if (specs.placement.target_class >= 0 &&
                    dd.class_id != specs.placement.target_class)
                    continue;
                if (dd.objectness <= specs.obj_keep_threshold) continue;
                ps.kept.push_back(d);
                fp.cells.push_back(dd.cell_index);
                // Targeted runs push every kept detection toward the chosen
                // label. Untargeted runs push toward the runner-up class (the
                // nearest decision boundary), so minimizing the cross-entropy
                // factor drives misclassification instead of reinforcing the
                // current label.
                int y_c = specs.placement.target_class;
                if (y_c < 0) {
                    y_c = dd.class_id == 0 ? 1 : 0;
                    for (size_t k = 0; k < dd.class_scores.size(); ++k)
                        if (static_cast<int>(k) != dd.class_id &&
                            dd.class_scores[k] > dd.class_scores[static_cast<size_t>(y_c)])
                            y_c = static_cast<int>(k);
                }
                fp.cls_targets.push_back(y_c);
                acc.obj_sum += dd.objectness;
                acc.cls_sum += cls_loss(dd.class_scores, y_c);
                ++acc.n;
            }
        }

        double l_obj_m = acc.n == 0 ? 0.0 : acc.obj_sum / acc.n;
        double l_cls_m = acc.n == 0 ? 0.0 : acc.cls_sum / acc.n;
        double det_term = detail::detection_term(specs.coupling, l_obj_m, l_cls_m);
        double l_m = det_term + lambda_tv * l_tv;
        res.breakdown.per_model.emplace_back(det.model_id(), l_m);
        weighted_det_term += alphas[m] * det_term;
        obj_all += l_obj_m;
        cls_all += l_cls_m;
        ++tracked_models;

        // Backward: d(det_term)/d(obj_i), d(det_term)/d(cls logits_i).
        if (acc.n > 0 && alphas[m] != 0.0) {
            double d_obj_mean = 0.0, d_cls_mean = 0.0;
            switch (specs.coupling) {
                case LossCoupling::Product:
                    d_obj_mean = l_cls_m;
                    d_cls_mean = l_obj_m;
                    break;
                case LossCoupling::Additive:
                    d_obj_mean = 1.0;
                    d_cls_mean = 1.0;
                    break;
                case LossCoupling::ObjOnly:
                    d_obj_mean = 1.0;
                    d_cls_mean = 0.0;
                    break;
            }
            for (size_t i = 0; i < B; ++i) {
                PassState& ps = states[i];
                if (ps.kept.empty()) continue;
                std::vector<DetectionGrad> grads(ps.dets.detections.size());
                size_t ki = 0;
                for (size_t d = 0; d < ps.dets.detections.size(); ++d) {
                    DetectionGrad& g = grads[d];
                    if (ki < ps.kept.size() && ps.kept[ki] == d) {
                        const Detection& dd = ps.dets.detections[d];
                        g.d_objectness = alphas[m] * d_obj_mean / acc.n;
                        if (d_cls_mean != 0.0) {
                            auto cg = cls_loss_grad(
                                dd.class_scores,
                                res.trace.passes[m][i].cls_targets[ki]);
                            g.d_class_scores.resize(cg.size());
                            for (size_t k = 0; k < cg.size(); ++k)
                                g.d_class_scores[k] =
                                    alphas[m] * d_cls_mean * cg[k] / acc.n;
                        }
                        ++ki;
                    }
                }
                Image d_img = ps.handle.backprop(grads);
                const FrozenPass& fp = res.trace.passes[m][i];
                std::vector<double> d_cut = placement_backward(
                    augmented[i], fp.boxes, cut_patches[i], specs.placement,
                    fp.placements, d_img);
                cutout_backward(fp.cutout, specs.cutout.fill_mode, d_cut,
                                patch.height, patch.width);
                for (size_t k = 0; k < d_cut.size(); ++k)
                    res.d_patch[k] += d_cut[k];
            }
        }
    }

    res.breakdown.l_obj = obj_all / tracked_models;
    res.breakdown.l_cls = cls_all / tracked_models;
    res.breakdown.l_tv = l_tv;
    res.breakdown.l_total = weighted_det_term + lambda_tv * l_tv;
    for (size_t k = 0; k < tv_grad.size(); ++k)
        res.d_patch[k] += lambda_tv * tv_grad[k];
    return res;
}

// Re-evaluates the objective as a pure function of the patch, with every
// sampled parameter and every detection selection frozen to the recorded
// trace. total_loss's analytic gradient is the exact derivative of this
// function; finite differences on it form the gradient oracle.
inline double frozen_total_loss(const Patch& patch,
                                const FrozenTrace& trace,
                                const std::vector<const DetectorAdapter*>& adapters,
                                const std::vector<double>& alphas,
                                const AttackSpecs& specs, double lambda_tv) {
    double total = 0.0;
    double l_tv = tv_loss(patch, specs.tv_floor);
    for (size_t m = 0; m < adapters.size(); ++m) {
        double obj_sum = 0.0, cls_sum = 0.0;
        int n = 0;
        for (const FrozenPass& fp : trace.passes[m]) {
            TransformParams cut_t = fp.cutout;
            // PatchMean fill tracks the current patch, not the recorded value.
            if (cut_t.cutout_applied &&
                specs.cutout.fill_mode == CutoutSpec::Fill::PatchMean)
                cut_t.cutout_fill = patch.mean();
            Patch cut = apply_cutout_params(patch, cut_t);
            Image adv = apply_placements(fp.augmented, fp.boxes, cut,
                                         specs.placement, fp.placements);
            auto outs = adapters[m]->cell_outputs(adv, fp.cells);
            for (size_t k = 0; k < outs.size(); ++k) {
                obj_sum += outs[k].first;
                cls_sum += cls_loss(outs[k].second, fp.cls_targets[k]);
                ++n;
            }
        }
        double l_obj = n == 0 ? 0.0 : obj_sum / n;
        double l_cls = n == 0 ? 0.0 : cls_sum / n;
        total += alphas[m] *
                 detail::detection_term(specs.coupling, l_obj, l_cls);
    }
    return total + lambda_tv * l_tv;
}

}  // namespace advpatch

#pragma once

#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "advpatch/common.hpp"
#include "advpatch/compositor.hpp"
#include "advpatch/core.hpp"
#include "advpatch/datasets.hpp"
#include "advpatch/detector.hpp"
#include "advpatch/metrics.hpp"
#include "advpatch/trainer.hpp"
#include "json.hpp"

namespace advpatch {

// Per-detector attack strength; mAP values on the percent scale.
struct DetectorEval {
    std::string detector_id;
    bool has_ground_truth = true;
    double clean_map = 0.0;
    double patched_map = 0.0;
    double drop = 0.0;  // clean - patched
    double gray_map = 0.0;
    double noise_map = 0.0;
    double white_map = 0.0;
    std::map<int, double> per_class_clean;
    std::map<int, double> per_class_patched;
};

struct EvalReport {
    std::vector<DetectorEval> rows;
    std::string config_digest;

    nlohmann::json to_json() const {
        nlohmann::json rows_j = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json pc_clean = nlohmann::json::object();
            for (const auto& [cls, ap] : r.per_class_clean)
                pc_clean[std::to_string(cls)] = ap;
            nlohmann::json pc_patched = nlohmann::json::object();
            for (const auto& [cls, ap] : r.per_class_patched)
                pc_patched[std::to_string(cls)] = ap;
            rows_j.push_back({{"detector", r.detector_id},
                              {"has_ground_truth", r.has_ground_truth},
                              {"clean_map", r.clean_map},
                              {"patched_map", r.patched_map},
                              {"drop", r.drop},
                              {"gray_map", r.gray_map},
                              {"noise_map", r.noise_map},
                              {"white_map", r.white_map},
                              {"per_class_clean", pc_clean},
                              {"per_class_patched", pc_patched}});
        }
        return nlohmann::json{{"rows", rows_j}, {"config_digest", config_digest}};
    }

    std::string to_text() const {
        std::ostringstream ss;
        ss << std::fixed << std::setprecision(2);
        ss << std::left << std::setw(14) << "Detector" << std::right
           << std::setw(8) << "Clean" << std::setw(9) << "Patched"
           << std::setw(7) << "Drop" << std::setw(8) << "Gray" << std::setw(8)
           << "Noise" << std::setw(8) << "White" << "\n";
        for (const auto& r : rows) {
            ss << std::left << std::setw(14) << r.detector_id << std::right;
            if (!r.has_ground_truth) {
                ss << "  (no ground truth)\n";
                continue;
            }
            ss << std::setw(8) << r.clean_map << std::setw(9) << r.patched_map
               << std::setw(7) << r.drop << std::setw(8) << r.gray_map
               << std::setw(8) << r.noise_map << std::setw(8) << r.white_map
               << "\n";
        }
        return ss.str();
    }

    std::string to_csv() const {
        std::ostringstream ss;
        ss << "detector,clean_map,patched_map,drop,gray_map,noise_map,white_map\n";
        for (const auto& r : rows)
            ss << r.detector_id << "," << r.clean_map << "," << r.patched_map
               << "," << r.drop << "," << r.gray_map << "," << r.noise_map
               << "," << r.white_map << "\n";
        return ss.str();
    }
};

namespace detail {

// mAP (percent) of a detector over images patched with `p` using the given
// per-image placement parameters. Placement on ground-truth boxes keeps
// evaluation independent of surrogate quality.
inline double patched_map_percent(
    const DetectorAdapter& det, const std::vector<Image>& images,
    const std::vector<GroundTruth>& gts, const Patch& p,
    const PlacementSpec& spec,
    const std::vector<std::vector<TransformParams>>& params,
    const std::vector<std::vector<BBox>>& boxes,
    std::map<int, double>* per_class = nullptr) {
    std::vector<DetectionSet> preds;
    for (size_t i = 0; i < images.size(); ++i) {
        Image adv = apply_placements(images[i], boxes[i], p, spec, params[i]);
        preds.push_back(det.detect(adv));
    }
    auto mr = compute_map(preds, gts);
    if (per_class) *per_class = mr.per_class_ap;
    return mr.has_ground_truth ? mr.map * 100.0 : 0.0;
}

}  // namespace detail

// Clean vs patched mAP per evaluation detector, plus gray/noise/white control
// patches under identical footprints (same placement params per image).
inline EvalReport evaluate_attack(const Patch& p,
                                  const std::vector<Image>& images,
                                  const std::vector<GroundTruth>& gts,
                                  const std::vector<const DetectorAdapter*>& adapters,
                                  const PlacementSpec& spec,
                                  std::uint64_t seed) {
    spec.validate();
    if (images.size() != gts.size())
        throw ContractError("evaluate_attack: images/gts size mismatch");

    bool any_gt = false;
    for (const auto& gt : gts) any_gt |= !gt.empty();

    // Placement targets come from ground truth; params sampled once per image
    // so every patch variant lands on identical footprints.
    std::vector<std::vector<BBox>> boxes(images.size());
    std::vector<std::vector<TransformParams>> params(images.size());
    Rng master(seed);
    for (size_t i = 0; i < images.size(); ++i) {
        for (const auto& g : gts[i])
            if (spec.target_class < 0 || g.class_id == spec.target_class)
                boxes[i].push_back(g.box);
        params[i] = sample_placement_params(boxes[i], p, spec, master.next_seed());
    }

    Patch gray = init_patch(p.width, PatchInit::Gray, 0);
    Patch noise = init_patch(p.width, PatchInit::Random, seed ^ 0x5eedc0ffeeull);
    Patch white = init_patch(p.width, PatchInit::White, 0);

    EvalReport report;
    report.config_digest = p.meta.config_digest;
    for (const auto* det : adapters) {
        DetectorEval row;
        row.detector_id = det->model_id();
        if (!any_gt) {
            row.has_ground_truth = false;
            report.rows.push_back(std::move(row));
            continue;
        }
        std::vector<DetectionSet> clean_preds;
        for (const auto& img : images) clean_preds.push_back(det->detect(img));
        auto clean = compute_map(clean_preds, gts);
        row.clean_map = clean.map * 100.0;
        row.per_class_clean = clean.per_class_ap;

        row.patched_map = detail::patched_map_percent(
            *det, images, gts, p, spec, params, boxes, &row.per_class_patched);
        row.drop = row.clean_map - row.patched_map;
        row.gray_map = detail::patched_map_percent(*det, images, gts, gray,
                                                   spec, params, boxes);
        row.noise_map = detail::patched_map_percent(*det, images, gts, noise,
                                                    spec, params, boxes);
        row.white_map = detail::patched_map_percent(*det, images, gts, white,
                                                    spec, params, boxes);
        report.rows.push_back(std::move(row));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Ensemble-configuration comparison and ablation grids
// ---------------------------------------------------------------------------

struct GridRow {
    std::string label;
    bool failed = false;
    std::string error;
    std::vector<double> maps;  // patched mAP per eval detector, percent
    double avg = 0.0;
};

struct GridTable {
    std::vector<std::string> eval_ids;
    std::vector<GridRow> rows;

    nlohmann::json to_json() const {
        nlohmann::json rows_j = nlohmann::json::array();
        for (const auto& r : rows)
            rows_j.push_back({{"label", r.label},
                              {"failed", r.failed},
                              {"error", r.error},
                              {"maps", r.maps},
                              {"avg", r.avg}});
        return nlohmann::json{{"eval_detectors", eval_ids}, {"rows", rows_j}};
    }

    std::string to_text() const {
        std::ostringstream ss;
        ss << std::fixed << std::setprecision(2);
        ss << std::left << std::setw(28) << "Configuration" << std::right;
        for (const auto& id : eval_ids) ss << std::setw(12) << id;
        ss << std::setw(10) << "Avg." << "\n";
        for (const auto& r : rows) {
            ss << std::left << std::setw(28) << r.label << std::right;
            if (r.failed) {
                ss << "  FAILED: " << r.error << "\n";
                continue;
            }
            for (double m : r.maps) ss << std::setw(12) << m;
            ss << std::setw(10) << r.avg << "\n";
        }
        return ss.str();
    }
};

struct EnsembleConfig {
    std::string label;
    std::vector<std::string> surrogate_ids;
};

using AdapterRegistry = std::map<std::string, const DetectorAdapter*>;

inline std::vector<const DetectorAdapter*> resolve_adapters(
    const AdapterRegistry& registry, const std::vector<std::string>& ids) {
    std::vector<const DetectorAdapter*> out;
    for (const auto& id : ids) {
        auto it = registry.find(id);
        if (it == registry.end())
            throw ConfigError("unknown detector id in config: " + id);
        out.push_back(it->second);
    }
    return out;
}

namespace detail {

inline GridRow evaluate_patch_row(const std::string& label, const Patch& patch,
                                  const std::vector<Image>& eval_images,
                                  const std::vector<GroundTruth>& eval_gts,
                                  const std::vector<const DetectorAdapter*>& evals,
                                  const PlacementSpec& spec, std::uint64_t seed) {
    GridRow row;
    row.label = label;
    auto report = evaluate_attack(patch, eval_images, eval_gts, evals, spec, seed);
    double sum = 0.0;
    for (const auto& r : report.rows) {
        row.maps.push_back(r.patched_map);
        sum += r.patched_map;
    }
    row.avg = report.rows.empty() ? 0.0 : sum / report.rows.size();
    return row;
}

}  // namespace detail

// Trains one patch per surrogate subset under identical budgets and evaluates
// each against every evaluation detector. Failed rows are marked, the rest
// proceed.
inline GridTable compare_ensembles(const std::vector<EnsembleConfig>& configs,
                                   const TrainConfig& base,
                                   const std::vector<Image>& train_images,
                                   const std::vector<Image>& eval_images,
                                   const std::vector<GroundTruth>& eval_gts,
                                   const AdapterRegistry& registry,
                                   const std::vector<std::string>& eval_ids) {
    if (configs.size() < 2)
        throw ConfigError("compare_ensembles needs >= 2 configurations");
    auto evals = resolve_adapters(registry, eval_ids);
    GridTable table;
    table.eval_ids = eval_ids;
    for (const auto& cfg : configs) {
        GridRow row;
        row.label = cfg.label;
        try {
            auto surrogates = resolve_adapters(registry, cfg.surrogate_ids);
            auto result = train(base, train_images, surrogates);
            row = detail::evaluate_patch_row(cfg.label, result.patch, eval_images,
                                             eval_gts, evals, base.specs.placement,
                                             base.seed);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline const std::vector<std::pair<std::string, std::string>>&
ablation_variants() {
    // label -> variant key understood by make_ablation_config
    static const std::vector<std::pair<std::string, std::string>> v = {
        {"full", "full"},
        {"- dynamic weight", "no_dynamic_weight"},
        {"- patch cutout", "no_cutout"},
        {"- classification loss", "no_cls_loss"},
        {"- total variation loss", "no_tv_loss"},
    };
    return v;
}

inline TrainConfig make_ablation_config(const TrainConfig& base,
                                        const std::string& variant) {
    TrainConfig cfg = base;
    if (variant == "full") return cfg;
    if (variant == "no_dynamic_weight") {
        cfg.dynamic_weights = false;
    } else if (variant == "no_cutout") {
        cfg.specs.cutout_enabled = false;
    } else if (variant == "no_cls_loss") {
        cfg.specs.coupling = LossCoupling::ObjOnly;
    } else if (variant == "no_tv_loss") {
        cfg.lambda_tv = 0.0;
    } else {
        throw ConfigError("unknown ablation variant: " + variant);
    }
    return cfg;
}

// Trains the full method plus the four ablated variants and evaluates all of
// them under identical budgets.
inline GridTable run_ablation(const TrainConfig& base,
                              const std::vector<std::string>& surrogate_ids,
                              const std::vector<Image>& train_images,
                              const std::vector<Image>& eval_images,
                              const std::vector<GroundTruth>& eval_gts,
                              const AdapterRegistry& registry,
                              const std::vector<std::string>& eval_ids) {
    auto evals = resolve_adapters(registry, eval_ids);
    auto surrogates = resolve_adapters(registry, surrogate_ids);
    GridTable table;
    table.eval_ids = eval_ids;
    for (const auto& [label, variant] : ablation_variants()) {
        GridRow row;
        row.label = label;
        try {
            TrainConfig cfg = make_ablation_config(base, variant);
            auto result = train(cfg, train_images, surrogates);
            row = detail::evaluate_patch_row(label, result.patch, eval_images,
                                             eval_gts, evals,
                                             cfg.specs.placement, cfg.seed);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

}  // namespace advpatch

#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "advpatch/common.hpp"
#include "advpatch/compositor.hpp"
#include "advpatch/datasets.hpp"
#include "advpatch/detector.hpp"
#include "advpatch/evaluation.hpp"
#include "advpatch/losses.hpp"
#include "advpatch/trainer.hpp"
#include "json.hpp"

namespace advpatch {

namespace detail {

inline void check_keys(const nlohmann::json& j,
                       const std::set<std::string>& allowed,
                       const std::string& section) {
    if (!j.is_object())
        throw ConfigError("config section '" + section + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in config section '" +
                              section + "'");
}

template <typename T>
inline T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config field '" + key + "' has the wrong type");
    }
}

}  // namespace detail

struct DetectorSpec {
    std::string id;
    ToyArch arch;
    std::uint64_t train_seed = 0;
    int train_epochs = 40;
    double min_val_map = 0.7;    // convergence gate on the eval split
    std::string weights_prefix;  // load instead of training when non-empty
};

struct DatasetConfig {
    std::string type = "synthetic";
    SyntheticSpec train_synthetic;
    SyntheticSpec eval_synthetic;
    std::string train_root;
    std::string eval_root;
};

struct RunConfig {
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    std::vector<DetectorSpec> detectors;
    std::vector<std::string> surrogates;
    std::vector<std::string> eval_detectors;
    TrainConfig train;
    std::vector<EnsembleConfig> compare_configs;
    std::string config_digest;
};

namespace detail {

inline SyntheticSpec parse_synthetic(const nlohmann::json& j,
                                     const std::string& section) {
    check_keys(j,
               {"num_images", "image_size", "shapes_min", "shapes_max",
                "size_min", "size_max", "seed"},
               section);
    SyntheticSpec s;
    s.num_images = get_or(j, "num_images", s.num_images);
    s.image_size = get_or(j, "image_size", s.image_size);
    s.shapes_min = get_or(j, "shapes_min", s.shapes_min);
    s.shapes_max = get_or(j, "shapes_max", s.shapes_max);
    s.size_min = get_or(j, "size_min", s.size_min);
    s.size_max = get_or(j, "size_max", s.size_max);
    s.seed = get_or<std::uint64_t>(j, "seed", s.seed);
    s.validate();
    return s;
}

inline PlacementSpec parse_placement(const nlohmann::json& j) {
    check_keys(j,
               {"relative_scale", "rotation_range", "brightness_jitter",
                "contrast_jitter", "target_class"},
               "placement");
    PlacementSpec s;
    s.relative_scale = get_or(j, "relative_scale", s.relative_scale);
    s.rotation_range = get_or(j, "rotation_range", s.rotation_range);
    s.brightness_jitter = get_or(j, "brightness_jitter", s.brightness_jitter);
    s.contrast_jitter = get_or(j, "contrast_jitter", s.contrast_jitter);
    s.target_class = get_or(j, "target_class", s.target_class);
    s.validate();
    return s;
}

inline AugmentSpec parse_augment(const nlohmann::json& j) {
    check_keys(j,
               {"flip_prob", "rotation_max", "hue_jitter", "saturation_jitter",
                "value_jitter", "crop_scale_lo", "crop_scale_hi"},
               "augment");
    AugmentSpec s;
    s.flip_prob = get_or(j, "flip_prob", s.flip_prob);
    s.rotation_max = get_or(j, "rotation_max", s.rotation_max);
    s.hue_jitter = get_or(j, "hue_jitter", s.hue_jitter);
    s.saturation_jitter = get_or(j, "saturation_jitter", s.saturation_jitter);
    s.value_jitter = get_or(j, "value_jitter", s.value_jitter);
    s.crop_scale_lo = get_or(j, "crop_scale_lo", s.crop_scale_lo);
    s.crop_scale_hi = get_or(j, "crop_scale_hi", s.crop_scale_hi);
    s.validate();
    return s;
}

inline CutoutSpec parse_cutout(const nlohmann::json& j, bool& enabled) {
    check_keys(j,
               {"p_crop", "side_fraction_lo", "side_fraction_hi", "fill_mode",
                "enabled"},
               "cutout");
    CutoutSpec s;
    s.p_crop = get_or(j, "p_crop", s.p_crop);
    s.side_fraction_lo = get_or(j, "side_fraction_lo", s.side_fraction_lo);
    s.side_fraction_hi = get_or(j, "side_fraction_hi", s.side_fraction_hi);
    if (j.contains("fill_mode"))
        s.fill_mode = cutout_fill_from_string(j.at("fill_mode").get<std::string>());
    enabled = get_or(j, "enabled", true);
    s.validate();
    return s;
}

inline DetectorSpec parse_detector(const nlohmann::json& j) {
    check_keys(j,
               {"id", "kind", "seed", "epochs", "num_classes", "input_size",
                "backbone", "conf_threshold", "nms_iou", "min_val_map",
                "weights_prefix"},
               "detectors[]");
    DetectorSpec d;
    if (!j.contains("id")) throw ConfigError("detector entry missing 'id'");
    d.id = j.at("id").get<std::string>();
    std::string kind = get_or<std::string>(j, "kind", "toy");
    if (kind != "toy")
        throw ConfigError("unsupported detector kind '" + kind +
                          "' for detector " + d.id);
    d.arch.model_id = d.id;
    d.arch.num_classes = get_or(j, "num_classes", d.arch.num_classes);
    d.arch.input_size = get_or(j, "input_size", d.arch.input_size);
    d.arch.conf_threshold = get_or(j, "conf_threshold", d.arch.conf_threshold);
    d.arch.nms_iou = get_or(j, "nms_iou", d.arch.nms_iou);
    if (j.contains("backbone")) {
        d.arch.backbone.clear();
        for (const auto& l : j.at("backbone")) {
            check_keys(l, {"out_ch", "kernel", "stride"}, "detectors[].backbone[]");
            d.arch.backbone.push_back({get_or(l, "out_ch", 8),
                                       get_or(l, "kernel", 3),
                                       get_or(l, "stride", 2)});
        }
    }
    d.train_seed = get_or<std::uint64_t>(j, "seed", 0);
    d.train_epochs = get_or(j, "epochs", d.train_epochs);
    d.min_val_map = get_or(j, "min_val_map", d.min_val_map);
    d.weights_prefix = get_or<std::string>(j, "weights_prefix", "");
    if (d.arch.num_classes < 2)
        throw ConfigError("detector num_classes must be >= 2 for " + d.id);
    return d;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"seed", "dataset", "detectors", "surrogates",
                        "eval_detectors", "train", "placement", "augment",
                        "cutout", "compare"},
                       "<root>");
    RunConfig cfg;
    cfg.seed = detail::get_or<std::uint64_t>(j, "seed", 0);
    cfg.config_digest = hex_digest(fnv1a(j.dump()));

    if (j.contains("dataset")) {
        const auto& dj = j.at("dataset");
        detail::check_keys(dj, {"type", "train", "eval", "train_root", "eval_root"},
                           "dataset");
        cfg.dataset.type = detail::get_or<std::string>(dj, "type", "synthetic");
        if (cfg.dataset.type == "synthetic") {
            if (dj.contains("train"))
                cfg.dataset.train_synthetic =
                    detail::parse_synthetic(dj.at("train"), "dataset.train");
            if (dj.contains("eval"))
                cfg.dataset.eval_synthetic =
                    detail::parse_synthetic(dj.at("eval"), "dataset.eval");
            else {
                cfg.dataset.eval_synthetic = cfg.dataset.train_synthetic;
                cfg.dataset.eval_synthetic.seed ^= 0x517e5eedull;
            }
        } else if (cfg.dataset.type == "voc-xml" ||
                   cfg.dataset.type == "coco-json" ||
                   cfg.dataset.type == "folder+txt") {
            cfg.dataset.train_root =
                detail::get_or<std::string>(dj, "train_root", "");
            cfg.dataset.eval_root = detail::get_or<std::string>(dj, "eval_root", "");
            if (cfg.dataset.train_root.empty() && cfg.dataset.eval_root.empty())
                throw ConfigError("dataset requires train_root or eval_root");
        } else {
            throw ConfigError("unknown dataset.type: " + cfg.dataset.type);
        }
    }

    if (j.contains("detectors"))
        for (const auto& dj : j.at("detectors"))
            cfg.detectors.push_back(detail::parse_detector(dj));
    cfg.surrogates =
        detail::get_or<std::vector<std::string>>(j, "surrogates", {});
    cfg.eval_detectors =
        detail::get_or<std::vector<std::string>>(j, "eval_detectors", {});

    TrainConfig& t = cfg.train;
    t.seed = cfg.seed;
    t.config_digest = cfg.config_digest;
    if (j.contains("train")) {
        const auto& tj = j.at("train");
        detail::check_keys(tj,
                           {"epochs", "batch_size", "lr_init", "lambda_tv", "eta",
                            "patch_size", "patch_init", "dynamic_weights",
                            "max_iterations", "checkpoint_interval", "coupling",
                            "tv_floor", "obj_keep_threshold"},
                           "train");
        t.epochs = detail::get_or(tj, "epochs", t.epochs);
        t.batch_size = detail::get_or(tj, "batch_size", t.batch_size);
        t.lr_init = detail::get_or(tj, "lr_init", t.lr_init);
        t.lambda_tv = detail::get_or(tj, "lambda_tv", t.lambda_tv);
        t.eta = detail::get_or(tj, "eta", t.eta);
        t.patch_size = detail::get_or(tj, "patch_size", t.patch_size);
        if (tj.contains("patch_init"))
            t.patch_init =
                patch_init_from_string(tj.at("patch_init").get<std::string>());
        t.dynamic_weights = detail::get_or(tj, "dynamic_weights", true);
        t.max_iterations = detail::get_or(tj, "max_iterations", 0);
        t.checkpoint_interval =
            detail::get_or(tj, "checkpoint_interval", t.checkpoint_interval);
        if (tj.contains("coupling"))
            t.specs.coupling =
                coupling_from_string(tj.at("coupling").get<std::string>());
        t.specs.tv_floor = detail::get_or(tj, "tv_floor", t.specs.tv_floor);
        t.specs.obj_keep_threshold =
            detail::get_or(tj, "obj_keep_threshold", t.specs.obj_keep_threshold);
    }
    if (j.contains("placement"))
        t.specs.placement = detail::parse_placement(j.at("placement"));
    if (j.contains("augment"))
        t.specs.augment = detail::parse_augment(j.at("augment"));
    if (j.contains("cutout"))
        t.specs.cutout = detail::parse_cutout(j.at("cutout"), t.specs.cutout_enabled);
    t.validate();

    if (j.contains("compare")) {
        const auto& cj = j.at("compare");
        detail::check_keys(cj, {"configs"}, "compare");
        for (const auto& e : cj.at("configs")) {
            detail::check_keys(e, {"label", "surrogates"}, "compare.configs[]");
            EnsembleConfig ec;
            ec.label = e.at("label").get<std::string>();
            ec.surrogate_ids = e.at("surrogates").get<std::vector<std::string>>();
            cfg.compare_configs.push_back(std::move(ec));
        }
    }

    // Cross-references must resolve.
    auto known = [&](const std::string& id) {
        for (const auto& d : cfg.detectors)
            if (d.id == id) return true;
        return false;
    };
    for (const auto& id : cfg.surrogates)
        if (!known(id)) throw ConfigError("surrogate references unknown detector id: " + id);
    for (const auto& id : cfg.eval_detectors)
        if (!known(id))
            throw ConfigError("eval_detectors references unknown detector id: " + id);
    for (const auto& ec : cfg.compare_configs)
        for (const auto& id : ec.surrogate_ids)
            if (!known(id))
                throw ConfigError("compare config '" + ec.label +
                                  "' references unknown detector id: " + id);
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

}  // namespace advpatch

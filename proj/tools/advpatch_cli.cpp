// Command-line front end: train / apply / evaluate / compare / ablate.
// Exit codes: 0 success, 1 runtime failure, 2 invalid config or input.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advpatch/advpatch.hpp"

namespace fs = std::filesystem;
using namespace advpatch;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed_override;
};

void write_text_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw IoError("cannot write: " + tmp);
        out << content;
    }
    fs::rename(tmp, path);
}

std::string now_iso8601() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
    return buf;
}

struct Workspace {
    RunConfig cfg;
    nlohmann::json raw_config;
    LoadedDataset train_split;
    LoadedDataset eval_split;
    std::vector<std::unique_ptr<ToyGridDetector>> owned;
    AdapterRegistry registry;
};

LoadedDataset load_split(const DatasetConfig& d, bool eval_split) {
    if (d.type == "synthetic") {
        auto spec = eval_split ? d.eval_synthetic : d.train_synthetic;
        return generate_synthetic(spec).data;
    }
    std::string root = eval_split ? d.eval_root : d.train_root;
    if (root.empty())
        throw ConfigError(std::string("dataset.") +
                          (eval_split ? "eval_root" : "train_root") +
                          " is required for this command");
    return load_images(load_dataset(root, d.type));
}

std::string detector_cache_prefix(const DetectorSpec& spec,
                                  const DatasetConfig& data) {
    const char* env = std::getenv("ADVPATCH_CACHE");
    if (!env || !*env) return "";
    nlohmann::json key{{"id", spec.id},
                       {"seed", spec.train_seed},
                       {"epochs", spec.train_epochs},
                       {"classes", spec.arch.num_classes},
                       {"conf", spec.arch.conf_threshold},
                       {"data_seed", data.train_synthetic.seed},
                       {"data_n", data.train_synthetic.num_images},
                       {"data_sz", data.train_synthetic.image_size}};
    for (const auto& l : spec.arch.backbone)
        key["backbone"].push_back({l.out_ch, l.kernel, l.stride});
    fs::create_directories(env);
    return (fs::path(env) / (spec.id + "_" + hex_digest(fnv1a(key.dump()))))
        .string();
}

void provision_detectors(Workspace& ws) {
    for (const auto& spec : ws.cfg.detectors) {
        std::unique_ptr<ToyGridDetector> det;
        std::string cache = detector_cache_prefix(spec, ws.cfg.dataset);
        if (!spec.weights_prefix.empty()) {
            det = std::make_unique<ToyGridDetector>(
                ToyGridDetector::load(spec.weights_prefix));
        } else if (!cache.empty() && fs::exists(cache + ".arch.json")) {
            det = std::make_unique<ToyGridDetector>(ToyGridDetector::load(cache));
        } else {
            if (ws.train_split.size() < 100)
                throw ConfigError(
                    "detector '" + spec.id +
                    "' needs training but the train split has < 100 images");
            std::cerr << "[advpatch] training detector " << spec.id << " ("
                      << spec.train_epochs << " epochs)\n";
            // Commands that skip the eval split (e.g. apply) train without
            // validation: no val set means no convergence gate to check.
            bool has_val = !ws.eval_split.images.empty();
            ToyTrainOptions opts;
            opts.min_val_map = spec.min_val_map;
            auto res = train_toy_detector(
                spec.arch, ws.train_split.images, ws.train_split.gts,
                spec.train_seed, spec.train_epochs,
                has_val ? &ws.eval_split.images : nullptr,
                has_val ? &ws.eval_split.gts : nullptr, opts);
            if (has_val)
                std::cerr << "[advpatch] detector " << spec.id
                          << " val mAP = " << res.val_map << "\n";
            det = std::make_unique<ToyGridDetector>(std::move(res.detector));
            if (!cache.empty()) det->save(cache);
        }
        ws.registry[spec.id] = det.get();
        ws.owned.push_back(std::move(det));
    }
}

Workspace open_workspace(const CommonArgs& args, bool need_train_split,
                         bool need_eval_split) {
    Workspace ws;
    {
        std::ifstream in(args.config_path);
        if (!in) throw ConfigError("cannot read config: " + args.config_path);
        try {
            in >> ws.raw_config;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config parse error: " + std::string(e.what()));
        }
    }
    ws.cfg = parse_run_config(ws.raw_config);
    if (args.seed_override) {
        ws.cfg.seed = *args.seed_override;
        ws.cfg.train.seed = *args.seed_override;
    }
    if (need_train_split) ws.train_split = load_split(ws.cfg.dataset, false);
    if (need_eval_split) ws.eval_split = load_split(ws.cfg.dataset, true);
    fs::create_directories(args.out_dir);
    return ws;
}

void write_run_manifest(const CommonArgs& args, const Workspace& ws,
                        const std::string& command) {
    nlohmann::json manifest{{"command", command},
                            {"timestamp", now_iso8601()},
                            {"config_digest", ws.cfg.config_digest},
                            {"seed", ws.cfg.seed}};
    write_text_atomic((fs::path(args.out_dir) / "run_manifest.json").string(),
                      manifest.dump(2) + "\n");
    write_text_atomic((fs::path(args.out_dir) / "config_echo.json").string(),
                      ws.raw_config.dump(2) + "\n");
}

int cmd_train(const CommonArgs& args) {
    Workspace ws = open_workspace(args, true, true);
    if (ws.cfg.surrogates.empty())
        throw ConfigError("train requires a non-empty 'surrogates' list");
    provision_detectors(ws);
    auto surrogates = resolve_adapters(ws.registry, ws.cfg.surrogates);

    fs::path out(args.out_dir);
    auto result = train(ws.cfg.train, ws.train_split.images, surrogates,
                        [&](long iter, const Patch& p, const EnsembleState& st) {
                            fs::path ckpt = out / "checkpoints";
                            fs::create_directories(ckpt);
                            save_patch(p, (ckpt / ("patch_" + std::to_string(iter) +
                                                   ".png")).string());
                            write_text_atomic(
                                (ckpt / ("state_" + std::to_string(iter) + ".json"))
                                    .string(),
                                st.to_json().dump(2) + "\n");
                        });

    save_patch(result.patch, (out / "patch.png").string());
    result.log.write_jsonl((out / "train_log.jsonl").string());
    std::vector<double> losses;
    for (const auto& r : result.log.records) losses.push_back(r.l_total);
    plot_loss_curve(losses, (out / "loss_curve.png").string());
    write_run_manifest(args, ws, "train");
    std::cout << "wrote " << (out / "patch.png").string() << " ("
              << result.log.records.size() << " iterations)\n";
    return 0;
}

int cmd_apply(const CommonArgs& args, const std::string& patch_path,
              const std::string& input_path) {
    Workspace ws = open_workspace(args, true, false);
    if (ws.cfg.surrogates.empty())
        throw ConfigError("apply requires a non-empty 'surrogates' list");
    provision_detectors(ws);
    const DetectorAdapter* det = ws.registry.at(ws.cfg.surrogates.front());

    Patch patch = load_patch(patch_path);
    std::vector<fs::path> inputs;
    if (fs::is_directory(input_path)) {
        for (const auto& de : fs::directory_iterator(input_path))
            if (de.path().extension() == ".png") inputs.push_back(de.path());
        std::sort(inputs.begin(), inputs.end());
    } else {
        inputs.push_back(input_path);
    }
    if (inputs.empty()) throw IoError("no input images found: " + input_path);

    fs::path out(args.out_dir);
    std::ofstream log((out / "apply_log.jsonl").string());
    Rng master(ws.cfg.seed);
    for (const auto& path : inputs) {
        Image img = read_png(path.string());
        DetectionSet dets = det->detect(img);
        auto placed = place_patch(img, dets, patch, ws.cfg.train.specs.placement,
                                  master.next_seed());
        std::string name = path.stem().string();
        write_png((out / (name + "_adv.png")).string(), placed.image);
        nlohmann::json rec{{"image", path.string()},
                           {"detections", dets.size()},
                           {"placements", nlohmann::json::array()}};
        for (const auto& t : placed.params)
            rec["placements"].push_back(t.to_json());
        if (placed.params.empty()) rec["note"] = "no placement";
        log << rec.dump() << "\n";
    }
    write_run_manifest(args, ws, "apply");
    std::cout << "wrote " << inputs.size() << " patched image(s) to "
              << out.string() << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& patch_path) {
    Workspace ws = open_workspace(args, true, true);
    if (ws.cfg.eval_detectors.empty())
        throw ConfigError("evaluate requires a non-empty 'eval_detectors' list");
    provision_detectors(ws);
    auto evals = resolve_adapters(ws.registry, ws.cfg.eval_detectors);

    Patch patch = load_patch(patch_path);
    auto report = evaluate_attack(patch, ws.eval_split.images, ws.eval_split.gts,
                                  evals, ws.cfg.train.specs.placement, ws.cfg.seed);

    fs::path out(args.out_dir);
    write_text_atomic((out / "eval_report.json").string(),
                      report.to_json().dump(2) + "\n");
    write_text_atomic((out / "eval_report.txt").string(), report.to_text());
    write_text_atomic((out / "eval_report.csv").string(), report.to_csv());

    std::vector<std::string> labels;
    std::vector<std::vector<double>> groups;
    for (const auto& r : report.rows) {
        labels.push_back(r.detector_id);
        groups.push_back({r.clean_map, r.patched_map, r.gray_map, r.noise_map,
                          r.white_map});
    }
    plot_bar_groups(labels, groups, (out / "map_bars.png").string());
    write_run_manifest(args, ws, "evaluate");
    std::cout << report.to_text();
    return 0;
}

int cmd_compare(const CommonArgs& args) {
    Workspace ws = open_workspace(args, true, true);
    if (ws.cfg.compare_configs.size() < 2)
        throw ConfigError("compare requires >= 2 entries in compare.configs");
    if (ws.cfg.eval_detectors.empty())
        throw ConfigError("compare requires a non-empty 'eval_detectors' list");
    provision_detectors(ws);

    auto table = compare_ensembles(ws.cfg.compare_configs, ws.cfg.train,
                                   ws.train_split.images, ws.eval_split.images,
                                   ws.eval_split.gts, ws.registry,
                                   ws.cfg.eval_detectors);
    fs::path out(args.out_dir);
    write_text_atomic((out / "compare_table.json").string(),
                      table.to_json().dump(2) + "\n");
    write_text_atomic((out / "compare_table.txt").string(), table.to_text());
    write_run_manifest(args, ws, "compare");
    std::cout << table.to_text();
    for (const auto& r : table.rows)
        if (r.failed) return 1;
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    Workspace ws = open_workspace(args, true, true);
    if (ws.cfg.surrogates.empty())
        throw ConfigError("ablate requires a non-empty 'surrogates' list");
    if (ws.cfg.eval_detectors.empty())
        throw ConfigError("ablate requires a non-empty 'eval_detectors' list");
    provision_detectors(ws);

    auto table = run_ablation(ws.cfg.train, ws.cfg.surrogates,
                              ws.train_split.images, ws.eval_split.images,
                              ws.eval_split.gts, ws.registry,
                              ws.cfg.eval_detectors);
    fs::path out(args.out_dir);
    write_text_atomic((out / "ablation_table.json").string(),
                      table.to_json().dump(2) + "\n");
    write_text_atomic((out / "ablation_table.txt").string(), table.to_text());
    write_run_manifest(args, ws, "ablate");
    std::cout << table.to_text();
    for (const auto& r : table.rows)
        if (r.failed) return 1;
    return 0;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run config file (JSON)")
        ->required();
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed_override,
                    "seed override (takes precedence over config)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adversarial patch toolkit"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string patch_path, input_path;

    auto* train_cmd = app.add_subcommand("train", "optimize a patch");
    add_common(train_cmd, args);

    auto* apply_cmd =
        app.add_subcommand("apply", "apply a patch to images via detections");
    add_common(apply_cmd, args);
    apply_cmd->add_option("--patch", patch_path, "patch PNG")->required();
    apply_cmd->add_option("--images", input_path, "image file or directory")
        ->required();

    auto* eval_cmd = app.add_subcommand("evaluate", "clean vs patched mAP");
    add_common(eval_cmd, args);
    eval_cmd->add_option("--patch", patch_path, "patch PNG")->required();

    auto* compare_cmd =
        app.add_subcommand("compare", "compare ensemble configurations");
    add_common(compare_cmd, args);

    auto* ablate_cmd = app.add_subcommand("ablate", "component ablation grid");
    add_common(ablate_cmd, args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(args);
        if (apply_cmd->parsed()) return cmd_apply(args, patch_path, input_path);
        if (eval_cmd->parsed()) return cmd_evaluate(args, patch_path);
        if (compare_cmd->parsed()) return cmd_compare(args);
        if (ablate_cmd->parsed()) return cmd_ablate(args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

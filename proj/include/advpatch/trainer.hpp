#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "advpatch/common.hpp"
#include "advpatch/core.hpp"
#include "advpatch/detector.hpp"
#include "advpatch/losses.hpp"
#include "advpatch/nn.hpp"
#include "json.hpp"

namespace advpatch {

inline std::vector<double> init_weights(int num_models) {
    if (num_models < 1) throw ConfigError("ensemble needs >= 1 model");
    return std::vector<double>(static_cast<size_t>(num_models),
                               1.0 / num_models);
}

// Gradient step on the mixture weights (d(sum alpha_m L_m)/d alpha_m = L_m),
// floored at zero and renormalized onto the simplex. A degenerate step that
// floors everything resets to uniform.
inline std::vector<double> update_weights(const std::vector<double>& alphas,
                                          const std::vector<double>& losses,
                                          double eta) {
    if (alphas.size() != losses.size())
        throw ContractError("update_weights: size mismatch");
    if (eta < 0.0) throw ConfigError("weight step eta must be >= 0");
    std::vector<double> raw(alphas.size());
    double sum = 0.0;
    for (size_t m = 0; m < alphas.size(); ++m) {
        raw[m] = std::max(0.0, alphas[m] - eta * losses[m]);
        sum += raw[m];
    }
    if (sum <= 0.0) return init_weights(static_cast<int>(alphas.size()));
    for (double& v : raw) v /= sum;
    return raw;
}

// Reduce-on-plateau learning-rate schedule.
struct SchedulerState {
    double lr = 0.03;
    double lr_min = 1e-4;
    double factor = 0.5;
    int patience = 50;
    double rel_threshold = 1e-3;

    double best_loss = std::numeric_limits<double>::infinity();
    int since_improvement = 0;
};

inline void scheduler_step(SchedulerState& s, double current_loss) {
    if (current_loss < s.best_loss * (1.0 - s.rel_threshold) ||
        !std::isfinite(s.best_loss)) {
        s.best_loss = current_loss;
        s.since_improvement = 0;
        return;
    }
    if (++s.since_improvement >= s.patience) {
        s.lr = std::max(s.lr * s.factor, s.lr_min);
        s.since_improvement = 0;
    }
}

struct EnsembleState {
    std::vector<double> alphas;
    double eta = 0.01;
    long iteration = 0;
    SchedulerState scheduler;
    std::vector<double> loss_history;  // bounded

    nlohmann::json to_json() const {
        return nlohmann::json{{"alphas", alphas},
                              {"eta", eta},
                              {"iteration", iteration},
                              {"lr", scheduler.lr},
                              {"best_loss", scheduler.best_loss},
                              {"since_improvement", scheduler.since_improvement}};
    }
};

struct TrainConfig {
    int epochs = 1000;
    int batch_size = 16;
    double lr_init = 0.03;
    double lambda_tv = 2.5;
    double eta = 0.01;
    int patch_size = kDefaultPatchSide;
    PatchInit patch_init = PatchInit::Random;
    bool dynamic_weights = true;
    std::uint64_t seed = 0;
    AttackSpecs specs;
    int checkpoint_interval = 100;
    int max_iterations = 0;  // 0: run all epochs; >0: hard iteration cap
    std::string config_digest;

    void validate() const {
        if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (lr_init <= 0.0) throw ConfigError("train.lr_init must be > 0");
        if (lambda_tv < 0.0) throw ConfigError("train.lambda_tv must be >= 0");
        if (eta < 0.0) throw ConfigError("train.eta must be >= 0");
        if (patch_size < kMinPatchSide)
            throw ConfigError("train.patch_size must be >= 8");
        specs.augment.validate();
        specs.placement.validate();
        specs.cutout.validate();
    }
};

struct IterationRecord {
    long iteration = 0;
    double l_total = 0.0;
    double l_obj = 0.0, l_cls = 0.0, l_tv = 0.0;
    std::vector<std::pair<std::string, double>> per_model;
    std::vector<double> alphas;
    double lr = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json pm = nlohmann::json::object();
        for (const auto& [id, v] : per_model) pm[id] = v;
        return nlohmann::json{{"iteration", iteration}, {"l_total", l_total},
                              {"l_obj", l_obj},         {"l_cls", l_cls},
                              {"l_tv", l_tv},           {"per_model", pm},
                              {"alphas", alphas},       {"lr", lr}};
    }
};

struct TrainLog {
    std::vector<IterationRecord> records;

    void write_jsonl(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write train log: " + path);
        for (const auto& r : records) out << r.to_json().dump() << "\n";
    }
};

struct TrainResult {
    Patch patch;
    TrainLog log;
    EnsembleState state;
};

using CheckpointCallback =
    std::function<void(long iteration, const Patch&, const EnsembleState&)>;

// The optimization loop: sample batch -> evaluate ensemble loss and patch
// gradient -> Adam step -> clamp -> weight update -> scheduler step.
inline TrainResult train(const TrainConfig& config,
                         const std::vector<Image>& dataset,
                         const std::vector<const DetectorAdapter*>& adapters,
                         CheckpointCallback checkpoint = nullptr) {
    config.validate();
    if (dataset.empty()) throw ConfigError("training dataset is empty");
    if (adapters.empty()) throw ConfigError("training needs >= 1 surrogate");
    for (const auto* a : adapters)
        if (!a->supports_gradients())
            throw ConfigError("surrogate " + a->model_id() +
                              " is not gradient-capable");

    TrainResult res;
    res.patch = init_patch(config.patch_size, config.patch_init, config.seed);
    res.patch.meta.lambda_tv = config.lambda_tv;
    res.patch.meta.config_digest = config.config_digest;
    for (const auto* a : adapters)
        res.patch.meta.surrogate_ids.push_back(a->model_id());

    EnsembleState& st = res.state;
    st.alphas = init_weights(static_cast<int>(adapters.size()));
    st.eta = config.eta;
    st.scheduler.lr = config.lr_init;

    nn::Adam adam(res.patch.size(), config.lr_init);
    Rng master(config.seed ^ 0xa5a5a5a5deadbeefull);

    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    long iters_per_epoch =
        (static_cast<long>(dataset.size()) + config.batch_size - 1) /
        config.batch_size;
    long total_iters = iters_per_epoch * config.epochs;
    if (config.max_iterations > 0)
        total_iters = std::min<long>(total_iters, config.max_iterations);

    size_t cursor = dataset.size();  // force initial shuffle
    for (long iter = 0; iter < total_iters; ++iter) {
        std::vector<const Image*> batch;
        for (int b = 0; b < config.batch_size; ++b) {
            if (cursor >= dataset.size()) {
                std::shuffle(order.begin(), order.end(), master.engine());
                cursor = 0;
            }
            batch.push_back(&dataset[order[cursor++]]);
        }

        std::uint64_t loss_seed = master.next_seed();
        auto result = total_loss(res.patch, batch, adapters, st.alphas,
                                 config.specs, config.lambda_tv, loss_seed);

        if (!std::isfinite(result.breakdown.l_total))
            throw NumericError("non-finite loss at iteration " +
                               std::to_string(iter) + "; alphas[0]=" +
                               std::to_string(st.alphas[0]) +
                               ", lr=" + std::to_string(st.scheduler.lr));
        for (double g : result.d_patch)
            if (!std::isfinite(g))
                throw NumericError("non-finite gradient at iteration " +
                                   std::to_string(iter));

        adam.lr = st.scheduler.lr;
        adam.step(res.patch.pixels, result.d_patch);
        clamp_patch_inplace(res.patch);

        if (config.dynamic_weights) {
            std::vector<double> per_losses;
            for (const auto& [id, v] : result.breakdown.per_model)
                per_losses.push_back(v);
            st.alphas = update_weights(st.alphas, per_losses, st.eta);
        }
        scheduler_step(st.scheduler, result.breakdown.l_total);
        st.iteration = iter + 1;
        st.loss_history.push_back(result.breakdown.l_total);
        if (st.loss_history.size() > 1000)
            st.loss_history.erase(st.loss_history.begin());

        IterationRecord rec;
        rec.iteration = iter;
        rec.l_total = result.breakdown.l_total;
        rec.l_obj = result.breakdown.l_obj;
        rec.l_cls = result.breakdown.l_cls;
        rec.l_tv = result.breakdown.l_tv;
        rec.per_model = result.breakdown.per_model;
        rec.alphas = st.alphas;
        rec.lr = st.scheduler.lr;
        res.log.records.push_back(std::move(rec));

        if (checkpoint && config.checkpoint_interval > 0 &&
            (iter + 1) % config.checkpoint_interval == 0)
            checkpoint(iter + 1, res.patch, st);
    }

    res.patch.meta.epochs_trained = static_cast<int>(
        total_iters / std::max<long>(1, iters_per_epoch));
    return res;
}

}  // namespace advpatch

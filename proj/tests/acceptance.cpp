// Acceptance suite: end-to-end checks of the attack pipeline, printed one
// line per criterion. Exit code is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include "advpatch/advpatch.hpp"
#include "oracles.hpp"

using namespace advpatch;

namespace {

int g_failures = 0;

void report(int idx, const std::string& name, bool pass,
            const std::string& detail, double seconds) {
    std::printf("criterion %d [%s]: %s  (%s; %.1fs)\n", idx,
                name.c_str(), pass ? "PASS" : "FAIL", detail.c_str(), seconds);
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                             t0)
            .count();
    }
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Shared fixtures: synthetic splits and three independently-seeded detectors.
// ---------------------------------------------------------------------------

struct Fixture {
    LoadedDataset train, eval;
    ToyGridDetector detA, detB, detC;
    double mapA = 0.0, mapB = 0.0, mapC = 0.0;

    Fixture() {
        SyntheticSpec spec;
        spec.num_images = 200;
        spec.shapes_min = 1;
        spec.shapes_max = 1;
        spec.size_min = 0.35;
        spec.size_max = 0.6;
        spec.seed = 1001;
        train = generate_synthetic(spec).data;
        spec.num_images = 100;
        spec.seed = 2002;
        eval = generate_synthetic(spec).data;

        detA = make_detector("toyA", {{16, 5, 2}, {20, 5, 2}, {20, 3, 1}}, 101,
                             mapA);
        detB = make_detector("toyB", {{16, 5, 2}, {16, 5, 2}, {24, 3, 1}}, 202,
                             mapB);
        detC = make_detector("toyC", {{20, 5, 2}, {16, 5, 2}, {20, 3, 1}}, 404,
                             mapC);
    }

    // Detector training data: the train split plus one occlusion-augmented
    // copy of each image (a gray / noise / white square over the object,
    // labels unchanged). Mature detectors tolerate benign occlusion; without
    // this, a blank square is as lethal as an optimized patch and the control
    // comparison in criterion 5 measures nothing.
    void occlusion_augmented(std::vector<Image>& images,
                             std::vector<GroundTruth>& gts) const {
        images = train.images;
        gts = train.gts;
        Rng rng(4242);
        for (size_t i = 0; i < train.images.size(); ++i) {
            std::vector<BBox> boxes;
            for (const auto& g : train.gts[i]) boxes.push_back(g.box);
            PlacementSpec ps;
            ps.rotation_range = 20.0;
            Patch occ = init_patch(16, PatchInit::Gray, 0);
            switch (rng.uniform_int(0, 2)) {
                case 0:  // gray
                    ps.relative_scale = rng.uniform(0.2, 0.4);
                    break;
                case 1:  // noise
                    ps.relative_scale = rng.uniform(0.2, 0.4);
                    for (double& v : occ.pixels) v = rng.unit();
                    break;
                default:  // white, over a wider scale band
                    ps.relative_scale = rng.uniform(0.2, 0.5);
                    for (double& v : occ.pixels) v = 1.0;
                    break;
            }
            auto res = place_on_boxes(train.images[i], boxes, occ, ps,
                                      rng.next_seed());
            images.push_back(std::move(res.image));
            gts.push_back(train.gts[i]);
        }
    }

    ToyGridDetector make_detector(const std::string& id,
                                  std::vector<ConvSpec> backbone,
                                  std::uint64_t seed, double& val_map) {
        // Dev-only cache so repeated acceptance runs skip ~10 min of detector
        // training per model; unset by default.
        const char* cache_dir = std::getenv("ACCEPT_DET_CACHE");
        std::string prefix =
            cache_dir ? std::string(cache_dir) + "/" + id : std::string();
        if (!prefix.empty() &&
            std::ifstream(prefix + ".arch.json").good()) {
            ToyGridDetector det = ToyGridDetector::load(prefix);
            std::vector<DetectionSet> preds;
            for (const auto& img : eval.images) preds.push_back(det.detect(img));
            val_map = compute_map(preds, eval.gts).map;
            return det;
        }
        std::vector<Image> images;
        std::vector<GroundTruth> gts;
        occlusion_augmented(images, gts);
        ToyArch arch;
        arch.model_id = id;
        arch.backbone = std::move(backbone);
        ToyTrainOptions opts;
        opts.label_smoothing = 0.1;
        auto res = train_toy_detector(arch, images, gts, seed, 110,
                                      &eval.images, &eval.gts, opts);
        val_map = res.val_map;
        if (!prefix.empty()) res.detector.save(prefix);
        return std::move(res.detector);
    }
};

TrainConfig attack_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.patch_size = 48;
    cfg.batch_size = 8;
    cfg.epochs = 1000;
    cfg.max_iterations = 1200;
    cfg.lr_init = 0.05;
    cfg.lambda_tv = 1.0;
    cfg.eta = 0.001;
    cfg.seed = seed;
    cfg.checkpoint_interval = 0;
    cfg.specs.placement.relative_scale = 0.45;
    cfg.specs.placement.rotation_range = 15.0;
    cfg.specs.augment.rotation_max = 4.0;
    return cfg;
}

struct SeedResult {
    Patch patch;
    TrainLog log;
};

// Dev-only patch cache (ACCEPT_PATCH_CACHE): reuses previously trained
// patches across acceptance runs while iterating on evaluation code; unset by
// default so real runs always train. Criterion 8 never consults it — its
// determinism rerun must train for real.
Patch train_cached(const std::string& tag, const TrainConfig& cfg,
                   const std::vector<Image>& images,
                   const std::vector<const DetectorAdapter*>& surrogates,
                   TrainLog* log_out = nullptr) {
    const char* dir = std::getenv("ACCEPT_PATCH_CACHE");
    std::string path = dir ? std::string(dir) + "/" + tag + ".raw" : "";
    if (!path.empty()) {
        Patch p = init_patch(cfg.patch_size, PatchInit::Gray, 0);
        std::ifstream fin(path, std::ios::binary);
        fin.read(reinterpret_cast<char*>(p.pixels.data()),
                 static_cast<long>(p.pixels.size() * sizeof(double)));
        if (fin.good()) return p;
    }
    auto res = train(cfg, images, surrogates);
    if (log_out) *log_out = std::move(res.log);
    if (!path.empty()) {
        std::ofstream fout(path, std::ios::binary);
        fout.write(reinterpret_cast<const char*>(res.patch.pixels.data()),
                   static_cast<long>(res.patch.pixels.size() * sizeof(double)));
    }
    return res.patch;
}

// Patched mAP (percent) of one detector on the eval split.
double patched_map(const Fixture& f, const Patch& p,
                   const DetectorAdapter& det, const PlacementSpec& spec,
                   std::uint64_t seed) {
    auto rep = evaluate_attack(p, f.eval.images, f.eval.gts, {&det}, spec, seed);
    return rep.rows[0].patched_map;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

void criterion_1_tv_oracle() {
    Timer t;
    bool pass = true;
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 50 && pass; ++s) {
        Patch p = init_patch(static_cast<int>(8 + s % 9), PatchInit::Random, s);
        double diff = std::abs(tv_loss_raw(p) - oracles::tv_bruteforce(p));
        worst = std::max(worst, diff);
        if (diff > 1e-9) pass = false;
    }
    Patch flat = init_patch(32, PatchInit::Gray, 0);
    if (tv_loss(flat) != kTvFloor) pass = false;
    for (double g : tv_loss_grad(flat))
        if (g != 0.0) pass = false;
    report(1, "total-variation oracle", pass,
           "50 random patches vs brute-force enumeration, worst |diff| " +
               fmt(worst) + "; constant patch floors at " + fmt(kTvFloor),
           t.elapsed());
}

void criterion_2_gradient_check(const Fixture& f) {
    Timer t;
    std::vector<const DetectorAdapter*> adapters = {&f.detA};
    Patch p = init_patch(48, PatchInit::Random, 7);
    for (double& v : p.pixels) v = 0.3 + 0.4 * v;  // keep the clamp inactive

    std::vector<const Image*> batch;
    for (size_t i = 0; i < 4; ++i) batch.push_back(&f.eval.images[i]);
    AttackSpecs specs = attack_config(0).specs;
    const double lambda_tv = 2.5;
    auto res = total_loss(p, batch, adapters, {1.0}, specs, lambda_tv, 99);

    std::vector<size_t> order(p.size());
    for (size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return std::abs(res.d_patch[a]) > std::abs(res.d_patch[b]);
    });

    const double eps = 1e-5;
    int tested = 0;
    double worst_rel = 0.0;
    bool pass = true;
    double base =
        frozen_total_loss(p, res.trace, adapters, {1.0}, specs, lambda_tv);
    for (size_t k : order) {
        if (tested >= 20) break;
        Patch hi = p, lo = p;
        hi.pixels[k] += eps;
        lo.pixels[k] -= eps;
        double fhi =
            frozen_total_loss(hi, res.trace, adapters, {1.0}, specs, lambda_tv);
        double flo =
            frozen_total_loss(lo, res.trace, adapters, {1.0}, specs, lambda_tv);
        double fd = (fhi - flo) / (2 * eps);
        // Skip pixels straddling a piecewise-linear kink, where one-sided
        // slopes disagree and no derivative comparison is meaningful.
        double fd_fwd = (fhi - base) / eps, fd_bwd = (base - flo) / eps;
        if (std::abs(fd_fwd - fd_bwd) > 1e-4 * std::max(1.0, std::abs(fd)))
            continue;
        double rel = std::abs(res.d_patch[k] - fd) / std::max(1e-6, std::abs(fd));
        worst_rel = std::max(worst_rel, rel);
        if (rel >= 1e-3) pass = false;
        ++tested;
    }
    if (tested < 20) pass = false;
    report(2, "analytic vs finite-difference patch gradient", pass,
           std::to_string(tested) + " pixels, worst relative error " +
               fmt(worst_rel),
           t.elapsed());
}

void criterion_3_weight_simplex() {
    Timer t;
    bool pass = true;
    auto w = update_weights({0.5, 0.5}, {2.0, 1.0}, 0.1);
    if (std::abs(w[0] - 3.0 / 7.0) > 1e-12 || std::abs(w[1] - 4.0 / 7.0) > 1e-12)
        pass = false;

    Rng rng(31337);
    double worst_sum_err = 0.0;
    for (int trial = 0; trial < 10000 && pass; ++trial) {
        int m = rng.uniform_int(1, 5);
        std::vector<double> alphas(static_cast<size_t>(m));
        double s = 0.0;
        for (double& a : alphas) s += a = rng.uniform(0.0, 1.0);
        for (double& a : alphas) a /= s;
        std::vector<double> losses(static_cast<size_t>(m));
        for (double& l : losses) l = rng.uniform(0.0, 10.0);
        auto next = update_weights(alphas, losses, rng.uniform(0.0, 1.0));
        double sum = 0.0;
        for (double a : next) {
            if (a < 0.0 || a > 1.0 + 1e-12) pass = false;
            sum += a;
        }
        worst_sum_err = std::max(worst_sum_err, std::abs(sum - 1.0));
        if (std::abs(sum - 1.0) > 1e-9) pass = false;
    }
    report(3, "ensemble weight update stays on the simplex", pass,
           "hand case + 10000 random updates, worst |sum-1| " +
               fmt(worst_sum_err),
           t.elapsed());
}

void criterion_4_map_oracle() {
    Timer t;
    Rng rng(7777);
    bool pass = true;
    double worst = 0.0;
    int scored = 0;
    for (int trial = 0; trial < 200 && pass; ++trial) {
        int n_images = rng.uniform_int(1, 8);
        int n_classes = rng.uniform_int(1, 3);
        std::vector<GroundTruth> gts;
        std::vector<DetectionSet> preds;
        for (int i = 0; i < n_images; ++i) {
            GroundTruth gt;
            int n_gt = rng.uniform_int(0, 4);
            for (int g = 0; g < n_gt; ++g) {
                double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
                gt.push_back({BBox(x, y, x + rng.uniform(5, 20),
                                   y + rng.uniform(5, 20)),
                              rng.uniform_int(0, n_classes - 1)});
            }
            DetectionSet ds;
            int n_det = rng.uniform_int(0, 6);
            for (int d = 0; d < n_det; ++d) {
                double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
                double w = rng.uniform(5, 20), h = rng.uniform(5, 20);
                int cls = rng.uniform_int(0, n_classes - 1);
                if (!gt.empty() && rng.bernoulli(0.6)) {
                    const auto& g = gt[static_cast<size_t>(rng.uniform_int(
                        0, static_cast<int>(gt.size()) - 1))];
                    x = g.box.x1 + rng.uniform(-3, 3);
                    y = g.box.y1 + rng.uniform(-3, 3);
                    w = g.box.width();
                    h = g.box.height();
                    if (rng.bernoulli(0.8)) cls = g.class_id;
                }
                std::vector<double> logits(static_cast<size_t>(n_classes) + 1,
                                           0.0);
                logits[static_cast<size_t>(cls)] = 1.0;
                ds.detections.emplace_back(BBox(x, y, x + w, y + h), cls,
                                           rng.unit(), std::move(logits));
            }
            gts.push_back(std::move(gt));
            preds.push_back(std::move(ds));
        }
        auto impl = compute_map(preds, gts);
        auto orac = oracles::map_threshold_sweep(preds, gts, kDefaultIouThresh);
        if (impl.has_ground_truth != orac.has_ground_truth) pass = false;
        if (impl.has_ground_truth) {
            ++scored;
            double diff = std::abs(impl.map - orac.map);
            worst = std::max(worst, diff);
            if (diff > 1e-12) pass = false;
        }
    }
    report(4, "mAP vs threshold-sweep oracle", pass,
           std::to_string(scored) + " scored instances, worst |diff| " +
               fmt(worst),
           t.elapsed());
}

void criterion_5_attack_strength(const Fixture& f,
                                 std::vector<SeedResult>& ensemble_patches) {
    Timer t;
    std::vector<const DetectorAdapter*> surrogates = {&f.detA, &f.detB};
    std::vector<const DetectorAdapter*> evals = {&f.detA, &f.detB};

    bool clean_ok = f.mapA >= 0.70 && f.mapB >= 0.70;
    // 3-seed means (across both eval detectors) of patched mAP and each
    // control patch's mAP; the attack must average >= 30 points below clean
    // and below every control.
    double patched = 0.0, gray = 0.0, noise = 0.0, white = 0.0, drop = 0.0;
    std::string per_seed;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        TrainConfig cfg = attack_config(seed);
        TrainLog log;
        Patch patch = train_cached("full_" + std::to_string(seed), cfg,
                                   f.train.images, surrogates, &log);
        ensemble_patches.push_back({patch, std::move(log)});

        auto rep = evaluate_attack(patch, f.eval.images, f.eval.gts, evals,
                                   cfg.specs.placement, 500 + seed);
        double seed_drop = 0.0;
        for (const auto& row : rep.rows) {
            double w = 1.0 / (3.0 * rep.rows.size());
            patched += row.patched_map * w;
            gray += row.gray_map * w;
            noise += row.noise_map * w;
            white += row.white_map * w;
            drop += row.drop * w;
            seed_drop += row.drop / rep.rows.size();
        }
        per_seed += (seed ? "/" : "") + fmt(seed_drop);
    }
    bool below_controls = patched < gray && patched < noise && patched < white;
    bool pass = clean_ok && drop >= 30.0 && below_controls;
    report(5, "attack strength on held-out images", pass,
           "surrogate clean mAP " + fmt(f.mapA * 100) + "/" +
               fmt(f.mapB * 100) + "%, per-seed drop " + per_seed +
               ", 3-seed mean drop " + fmt(drop) +
               " pts (need >= 30); mean patched " + fmt(patched) +
               " vs controls gray " + fmt(gray) + " / noise " + fmt(noise) +
               " / white " + fmt(white),
           t.elapsed());
}

void criterion_6_ensemble_transfer(const Fixture& f,
                                   const std::vector<SeedResult>& ensemble_patches) {
    Timer t;
    std::vector<const DetectorAdapter*> solo = {&f.detA};
    PlacementSpec spec = attack_config(0).specs.placement;
    int wins = 0;
    std::string detail;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        TrainConfig cfg = attack_config(seed);
        Patch solo_patch = train_cached("solo_" + std::to_string(seed), cfg,
                                        f.train.images, solo);
        double m_solo = patched_map(f, solo_patch, f.detC, spec, 1100 + seed);
        double m_ens = patched_map(f, ensemble_patches[seed].patch, f.detC,
                                   spec, 1100 + seed);
        if (m_ens < m_solo) ++wins;
        detail += (seed ? ", " : "") + fmt(m_ens) + " vs " + fmt(m_solo);
    }
    bool pass = wins >= 2;
    report(6, "ensemble transfers better to a held-out detector", pass,
           "patched mAP on toyC, ensemble vs single (" + detail + "); " +
               std::to_string(wins) + "/3 seeds in favor (need >= 2)",
           t.elapsed());
}

void criterion_7_ablations(const Fixture& f,
                           const std::vector<SeedResult>& ensemble_patches) {
    Timer t;
    std::vector<const DetectorAdapter*> surrogates = {&f.detA, &f.detB};
    PlacementSpec spec = attack_config(0).specs.placement;

    // Attack quality is judged on the held-out detector toyC: that's the
    // transfer setting the full method is built for, and it keeps this check
    // independent of the surrogate-overfitting effects criterion 5 covers.
    auto mean_patched = [&](const Patch& p, std::uint64_t seed) {
        return patched_map(f, p, f.detC, spec, 1100 + seed);
    };

    double full_mean = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed)
        full_mean += mean_patched(ensemble_patches[seed].patch, seed) / 3.0;

    bool pass = true;
    std::string detail = "full " + fmt(full_mean);
    for (const auto& [label, variant] : ablation_variants()) {
        if (variant == "full") continue;
        double variant_mean = 0.0;
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            TrainConfig cfg = make_ablation_config(attack_config(seed), variant);
            Patch patch = train_cached(variant + "_" + std::to_string(seed),
                                       cfg, f.train.images, surrogates);
            variant_mean += mean_patched(patch, seed) / 3.0;
        }
        detail += ", " + variant + " " + fmt(variant_mean);
        // Lower patched mAP is a stronger attack; no ablated variant may
        // beat the full method by more than 1 mAP point.
        if (variant_mean < full_mean - 1.0) pass = false;
    }
    report(7, "no ablated variant beats the full method", pass,
           "3-seed mean patched mAP on held-out toyC: " + detail, t.elapsed());
}

void criterion_8_determinism(const Fixture& f,
                             const std::vector<SeedResult>& ensemble_patches) {
    Timer t;
    std::vector<const DetectorAdapter*> surrogates = {&f.detA, &f.detB};
    TrainConfig cfg = attack_config(0);
    auto rerun = train(cfg, f.train.images, surrogates);

    double max_diff = 0.0;
    for (size_t k = 0; k < rerun.patch.size(); ++k)
        max_diff = std::max(max_diff,
                            std::abs(rerun.patch.pixels[k] -
                                     ensemble_patches[0].patch.pixels[k]));
    bool pass = max_diff <= 1e-6;

    bool range_ok = true;
    for (double v : rerun.patch.pixels)
        if (v < 0.0 || v > 1.0) range_ok = false;

    bool simplex_ok = true;
    for (const auto& rec : ensemble_patches[0].log.records) {
        double sum = 0.0;
        for (double a : rec.alphas) {
            if (a < 0.0) simplex_ok = false;
            sum += a;
        }
        if (std::abs(sum - 1.0) > 1e-9) simplex_ok = false;
    }
    pass = pass && range_ok && simplex_ok;
    report(8, "training determinism and invariants", pass,
           "rerun max |pixel diff| " + fmt(max_diff) +
               " (need <= 1e-6); pixels in [0,1]: " +
               (range_ok ? "yes" : "no") +
               "; logged weights on simplex: " + (simplex_ok ? "yes" : "no"),
           t.elapsed());
}

}  // namespace

int main() {
    Timer total;
    criterion_1_tv_oracle();
    criterion_3_weight_simplex();
    criterion_4_map_oracle();

    std::printf("setting up fixtures: training toyA/toyB/toyC detectors...\n");
    std::fflush(stdout);
    Fixture f;
    std::printf("fixture detectors ready: val mAP %.3f / %.3f / %.3f\n", f.mapA,
                f.mapB, f.mapC);
    std::fflush(stdout);

    criterion_2_gradient_check(f);
    std::vector<SeedResult> ensemble_patches;
    criterion_5_attack_strength(f, ensemble_patches);
    criterion_6_ensemble_transfer(f, ensemble_patches);
    criterion_7_ablations(f, ensemble_patches);
    criterion_8_determinism(f, ensemble_patches);

    std::printf("%d/8 criteria passed (%.1fs total)\n", 8 - g_failures,
                total.elapsed());
    return g_failures;
}

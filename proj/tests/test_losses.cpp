#include <catch2/catch_amalgamated.hpp>

#include "advpatch/losses.hpp"
#include "oracles.hpp"

using namespace advpatch;

namespace {

Detection det_with_obj(double obj, int cls = 0) {
    std::vector<double> logits = {0.0, 0.0, 0.0};
    logits[static_cast<size_t>(cls)] = 1.0;
    return Detection(BBox(0, 0, 10, 10), cls, obj, std::move(logits));
}

Patch random_patch(int side, std::uint64_t seed) {
    return init_patch(side, PatchInit::Random, seed);
}

Image random_image(int h, int w, std::uint64_t seed) {
    Image img(h, w, 0.0, "rand");
    Rng rng(seed);
    for (double& v : img.pixels) v = rng.unit();
    return img;
}

AttackSpecs cheap_specs() {
    AttackSpecs s;
    s.placement.rotation_range = 10.0;
    s.cutout.p_crop = 1.0;
    return s;
}

}  // namespace

TEST_CASE("obj_loss hand values") {
    DetectionSet ds;
    ds.detections.push_back(det_with_obj(0.8));
    ds.detections.push_back(det_with_obj(0.6));
    REQUIRE(obj_loss(ds) == Catch::Approx(0.7).margin(1e-12));

    ds.detections.push_back(det_with_obj(0.05));  // below keep threshold
    REQUIRE(obj_loss(ds) == Catch::Approx(0.7).margin(1e-12));

    REQUIRE(obj_loss(DetectionSet{}) == 0.0);

    DetectionSet mixed;
    mixed.detections.push_back(det_with_obj(0.9, 0));
    mixed.detections.push_back(det_with_obj(0.5, 1));
    REQUIRE(obj_loss(mixed, 1) == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("cls_loss hand values") {
    REQUIRE(cls_loss({0.0, 0.0}, 0) == Catch::Approx(std::log(2.0)).margin(1e-12));
    // softmax([ln 3, 0])_0 = 3/4
    REQUIRE(cls_loss({std::log(3.0), 0.0}, 0) ==
            Catch::Approx(-std::log(0.75)).margin(1e-12));
    REQUIRE(cls_loss({50.0, 0.0, 0.0}, 0) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(cls_loss({1000.0, 0.0}, 0) == Catch::Approx(0.0).margin(1e-12));

    REQUIRE_THROWS_AS(cls_loss({1.0}, 0), ContractError);
    REQUIRE_THROWS_AS(cls_loss({1.0, 2.0}, 2), ContractError);
    REQUIRE_THROWS_AS(cls_loss({1.0, std::nan("")}, 0), NumericError);
}

TEST_CASE("cls_loss_grad matches finite differences and sums to zero") {
    std::vector<double> logits = {0.3, -1.2, 2.0, 0.5};
    for (int target = 0; target < 4; ++target) {
        auto g = cls_loss_grad(logits, target);
        double sum = 0.0;
        for (double v : g) sum += v;
        REQUIRE(sum == Catch::Approx(0.0).margin(1e-12));
        const double eps = 1e-6;
        for (size_t k = 0; k < logits.size(); ++k) {
            auto hi = logits, lo = logits;
            hi[k] += eps;
            lo[k] -= eps;
            double fd = (cls_loss(hi, target) - cls_loss(lo, target)) / (2 * eps);
            REQUIRE(g[k] == Catch::Approx(fd).margin(1e-8));
        }
    }
}

TEST_CASE("tv_loss hand values and floor") {
    Patch flat = init_patch(16, PatchInit::Gray, 0);
    REQUIRE(tv_loss_raw(flat) == 0.0);
    REQUIRE(tv_loss(flat) == kTvFloor);
    for (double v : tv_loss_grad(flat)) REQUIRE(v == 0.0);

    // 8x8 vertical stripes alternating 0/1: per row, 7 horizontal jumps of 1
    // per channel; no vertical jumps. raw = 3 * 8 * 7 = 168; norm = 3*64.
    Patch stripes = init_patch(8, PatchInit::Gray, 0);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c)
            for (int ch = 0; ch < 3; ++ch) stripes.at(r, c, ch) = c % 2;
    REQUIRE(tv_loss_raw(stripes) == Catch::Approx(168.0).margin(1e-12));
    REQUIRE(tv_loss(stripes) == Catch::Approx(168.0 / 192.0).margin(1e-12));
}

TEST_CASE("tv_loss_raw equals brute-force enumeration on random patches") {
    for (std::uint64_t s = 0; s < 50; ++s) {
        Patch p = random_patch(static_cast<int>(8 + s % 9), s);
        REQUIRE(tv_loss_raw(p) ==
                Catch::Approx(oracles::tv_bruteforce(p)).margin(1e-9));
    }
}

TEST_CASE("tv invariances") {
    Patch p = random_patch(12, 21);
    double base = tv_loss_raw(p);

    Patch t = p;  // transpose
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 12; ++c)
            for (int ch = 0; ch < 3; ++ch) t.at(r, c, ch) = p.at(c, r, ch);
    REQUIRE(tv_loss_raw(t) == Catch::Approx(base).margin(1e-9));

    Patch f = p;  // horizontal flip
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 12; ++c)
            for (int ch = 0; ch < 3; ++ch) f.at(r, c, ch) = p.at(r, 11 - c, ch);
    REQUIRE(tv_loss_raw(f) == Catch::Approx(base).margin(1e-9));

    Patch sh = p;  // constant shift leaves differences alone
    for (double& v : sh.pixels) v += 0.25;
    REQUIRE(tv_loss_raw(sh) == Catch::Approx(base).margin(1e-9));
}

TEST_CASE("tv_loss_grad matches finite differences above the floor") {
    Patch p = random_patch(10, 33);
    REQUIRE(tv_loss(p) > kTvFloor);  // random patches are far above the floor
    auto g = tv_loss_grad(p);
    Rng pick(4);
    const double eps = 1e-7;
    for (int trial = 0; trial < 30; ++trial) {
        size_t k = static_cast<size_t>(
            pick.uniform_int(0, static_cast<int>(p.size()) - 1));
        Patch hi = p, lo = p;
        hi.pixels[k] += eps;
        lo.pixels[k] -= eps;
        double fd = (tv_loss(hi) - tv_loss(lo)) / (2 * eps);
        REQUIRE(g[k] == Catch::Approx(fd).margin(1e-6));
    }
}

TEST_CASE("total_loss: breakdown is self-consistent with the frozen replay") {
    ToyArch arch;
    arch.conf_threshold = 0.2;
    ToyGridDetector detA(arch, 11);
    arch.model_id = "toyB";
    ToyGridDetector detB(arch, 22);
    std::vector<const DetectorAdapter*> adapters = {&detA, &detB};

    Image img0 = random_image(64, 64, 1), img1 = random_image(64, 64, 2);
    std::vector<const Image*> batch = {&img0, &img1};
    Patch p = random_patch(24, 5);
    std::vector<double> alphas = {0.6, 0.4};
    AttackSpecs specs = cheap_specs();

    auto res = total_loss(p, batch, adapters, alphas, specs, 2.5, 99);
    double frozen = frozen_total_loss(p, res.trace, adapters, alphas, specs, 2.5);
    REQUIRE(res.breakdown.l_total == Catch::Approx(frozen).margin(1e-10));
    REQUIRE(res.breakdown.per_model.size() == 2);
    REQUIRE(res.breakdown.per_model[0].first == "toy");
    REQUIRE(res.breakdown.per_model[1].first == "toyB");
}

TEST_CASE("total_loss is deterministic in the seed") {
    ToyArch arch;
    arch.conf_threshold = 0.2;
    ToyGridDetector det(arch, 7);
    std::vector<const DetectorAdapter*> adapters = {&det};
    Image img = random_image(64, 64, 3);
    std::vector<const Image*> batch = {&img};
    Patch p = random_patch(24, 8);
    AttackSpecs specs = cheap_specs();

    auto a = total_loss(p, batch, adapters, {1.0}, specs, 2.5, 31);
    auto b = total_loss(p, batch, adapters, {1.0}, specs, 2.5, 31);
    auto c = total_loss(p, batch, adapters, {1.0}, specs, 2.5, 32);
    REQUIRE(a.breakdown.l_total == b.breakdown.l_total);
    REQUIRE(a.d_patch == b.d_patch);
    REQUIRE(a.breakdown.l_total != c.breakdown.l_total);
}

TEST_CASE("ensemble of two identical adapters equals the single model") {
    ToyArch arch;
    arch.conf_threshold = 0.2;
    ToyGridDetector det1(arch, 13);
    ToyGridDetector det2(arch, 13);
    Image img = random_image(64, 64, 4);
    std::vector<const Image*> batch = {&img};
    Patch p = random_patch(24, 9);
    AttackSpecs specs = cheap_specs();
    // Placement seeds differ per model slot, so zero every placement jitter
    // to make the sampled params identical by construction.
    specs.placement.rotation_range = 0.0;
    specs.placement.brightness_jitter = 0.0;
    specs.placement.contrast_jitter = 0.0;

    std::vector<const DetectorAdapter*> one = {&det1};
    std::vector<const DetectorAdapter*> two = {&det1, &det2};
    auto single = total_loss(p, batch, one, {1.0}, specs, 2.5, 55);
    auto pair = total_loss(p, batch, two, {0.5, 0.5}, specs, 2.5, 55);
    REQUIRE(pair.breakdown.l_total ==
            Catch::Approx(single.breakdown.l_total).margin(1e-10));
    for (size_t k = 0; k < p.size(); ++k)
        REQUIRE(pair.d_patch[k] == Catch::Approx(single.d_patch[k]).margin(1e-10));
}

TEST_CASE("ensemble total is linear in the weights") {
    ToyArch arch;
    arch.conf_threshold = 0.2;
    ToyGridDetector detA(arch, 41);
    arch.model_id = "toyB";
    ToyGridDetector detB(arch, 42);
    std::vector<const DetectorAdapter*> adapters = {&detA, &detB};
    Image img = random_image(64, 64, 6);
    std::vector<const Image*> batch = {&img};
    Patch p = random_patch(24, 10);
    AttackSpecs specs = cheap_specs();

    // Same seed => identical sampled transforms, so totals with different
    // alphas must satisfy the linear relation in (det_term_A, det_term_B).
    auto w1 = total_loss(p, batch, adapters, {1.0, 0.0}, specs, 0.0, 77);
    auto w2 = total_loss(p, batch, adapters, {0.0, 1.0}, specs, 0.0, 77);
    auto mix = total_loss(p, batch, adapters, {0.3, 0.7}, specs, 0.0, 77);
    REQUIRE(mix.breakdown.l_total ==
            Catch::Approx(0.3 * w1.breakdown.l_total +
                          0.7 * w2.breakdown.l_total)
                .margin(1e-10));
}

TEST_CASE("analytic patch gradient matches finite differences") {
    ToyArch arch;
    arch.conf_threshold = 0.2;
    ToyGridDetector det(arch, 17);
    std::vector<const DetectorAdapter*> adapters = {&det};
    Image img = random_image(64, 64, 12);
    std::vector<const Image*> batch = {&img};

    Patch p = random_patch(24, 14);
    // Interior values so the placement clamp stays inactive.
    for (double& v : p.pixels) v = 0.3 + 0.4 * v;

    AttackSpecs specs = cheap_specs();
    const double lambda_tv = 1.0;
    auto res = total_loss(p, batch, adapters, {1.0}, specs, lambda_tv, 88);

    // Only test pixels whose analytic gradient is meaningfully nonzero.
    std::vector<size_t> order(p.size());
    for (size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return std::abs(res.d_patch[a]) > std::abs(res.d_patch[b]);
    });
    REQUIRE(std::abs(res.d_patch[order[0]]) > 0.0);

    const double eps = 1e-5;
    int tested = 0;
    double base = frozen_total_loss(p, res.trace, adapters, {1.0}, specs,
                                    lambda_tv);
    for (size_t k : order) {
        if (tested >= 12) break;
        Patch hi = p, lo = p;
        hi.pixels[k] += eps;
        lo.pixels[k] -= eps;
        double fhi = frozen_total_loss(hi, res.trace, adapters, {1.0}, specs,
                                       lambda_tv);
        double flo = frozen_total_loss(lo, res.trace, adapters, {1.0}, specs,
                                       lambda_tv);
        double fd = (fhi - flo) / (2 * eps);
        // Skip pixels straddling a piecewise-linear kink (leaky relu or |.|
        // in the TV term): the one-sided slopes disagree there.
        double fd_fwd = (fhi - base) / eps, fd_bwd = (base - flo) / eps;
        if (std::abs(fd_fwd - fd_bwd) > 1e-4 * std::max(1.0, std::abs(fd)))
            continue;
        double denom = std::max(1e-6, std::abs(fd));
        REQUIRE(std::abs(res.d_patch[k] - fd) / denom < 1e-3);
        ++tested;
    }
    REQUIRE(tested == 12);
}

TEST_CASE("total_loss argument validation") {
    Patch p = random_patch(16, 1);
    Image img = random_image(64, 64, 1);
    std::vector<const Image*> batch = {&img};
    ToyGridDetector det(ToyArch{}, 3);
    AttackSpecs specs;
    REQUIRE_THROWS_AS(total_loss(p, batch, {}, {}, specs, 2.5, 0), ConfigError);
    REQUIRE_THROWS_AS(
        total_loss(p, batch, {&det}, {0.5, 0.5}, specs, 2.5, 0), ContractError);
    REQUIRE_THROWS_AS(total_loss(p, batch, {&det}, {1.0}, specs, -1.0, 0),
                      ConfigError);
    REQUIRE_THROWS_AS(coupling_from_string("geometric"), ConfigError);
}

#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "advpatch/common.hpp"
#include "advpatch/core.hpp"
#include "advpatch/metrics.hpp"
#include "advpatch/nn.hpp"
#include "json.hpp"

namespace advpatch {

// Per-detection upstream gradients fed into a detector backward pass.
// d_objectness is w.r.t. the post-sigmoid objectness value; d_class_scores
// w.r.t. the raw class logits. Order matches the DetectionSet.
struct DetectionGrad {
    double d_objectness = 0.0;
    std::vector<double> d_class_scores;
};

// Closure over one forward pass; maps upstream detection gradients to an
// image-shaped gradient (same layout as Image.pixels).
struct GradHandle {
    std::function<Image(const std::vector<DetectionGrad>&)> backprop;
};

// Uniform contract for surrogate (gradient-capable) and evaluation detectors.
class DetectorAdapter {
public:
    virtual ~DetectorAdapter() = default;
    virtual std::string model_id() const = 0;
    virtual int num_classes() const = 0;
    virtual int input_size() const = 0;
    virtual bool supports_gradients() const = 0;
    virtual DetectionSet detect(const Image& x) const = 0;
    virtual std::pair<DetectionSet, GradHandle> detect_with_grads(
        const Image& x) const {
        throw ContractError("detector " + model_id() +
                            " does not support gradients");
    }

    // Raw head outputs (objectness, class logits) at fixed grid cells.
    // Used to re-evaluate a loss under a frozen detection selection.
    virtual std::vector<std::pair<double, std::vector<double>>> cell_outputs(
        const Image&, const std::vector<int>&) const {
        throw ContractError("detector " + model_id() +
                            " does not expose cell outputs");
    }
};

// ---------------------------------------------------------------------------
// ToyGridDetector: a compact anchor-free grid detector with hand-rolled
// forward/backward, fully convolutional so any input size works.
// ---------------------------------------------------------------------------

struct ConvSpec {
    int out_ch = 8;
    int kernel = 3;
    int stride = 2;
};

struct ToyArch {
    std::string model_id = "toy";
    int num_classes = 3;
    int input_size = 64;  // nominal; the net is fully convolutional
    std::vector<ConvSpec> backbone = {{12, 3, 2}, {16, 3, 2}, {20, 3, 2}};
    double conf_threshold = 0.25;
    double nms_iou = 0.45;
};

namespace detail {

inline nn::Tensor image_to_tensor(const Image& img) {
    nn::Tensor t(3, img.height, img.width);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            for (int ch = 0; ch < 3; ++ch) t.at(ch, r, c) = img.at(r, c, ch);
    return t;
}

inline Image tensor_to_image_grad(const nn::Tensor& t) {
    Image g(t.h, t.w);
    for (int r = 0; r < t.h; ++r)
        for (int c = 0; c < t.w; ++c)
            for (int ch = 0; ch < 3; ++ch) g.at(r, c, ch) = t.at(ch, r, c);
    return g;
}

}  // namespace detail

class ToyGridDetector : public DetectorAdapter {
public:
    ToyGridDetector() = default;

    ToyGridDetector(ToyArch arch, std::uint64_t weight_seed) : arch_(std::move(arch)) {
        Rng rng(weight_seed);
        int in_ch = 3;
        for (const auto& spec : arch_.backbone) {
            layers_.emplace_back(in_ch, spec.out_ch, spec.kernel, spec.stride);
            layers_.back().init_he(rng);
            in_ch = spec.out_ch;
        }
        head_ = nn::Conv2d(in_ch, head_channels(), 1, 1);
        head_.init_he(rng);
    }

    int head_channels() const { return 1 + arch_.num_classes + 4; }

    std::string model_id() const override { return arch_.model_id; }
    int num_classes() const override { return arch_.num_classes; }
    int input_size() const override { return arch_.input_size; }
    bool supports_gradients() const override { return true; }
    const ToyArch& arch() const { return arch_; }
    double conf_threshold() const { return arch_.conf_threshold; }
    void set_conf_threshold(double t) { arch_.conf_threshold = t; }

    struct ForwardState {
        nn::Tensor input;
        std::vector<nn::Tensor> pre_act;  // conv outputs before leaky relu
        std::vector<nn::Tensor> act;      // after leaky relu
        nn::Tensor head;                  // raw head output
        int img_h = 0, img_w = 0;
    };

    ForwardState forward(const Image& x) const {
        if (x.height <= 0 || x.width <= 0 ||
            x.pixels.size() != static_cast<size_t>(x.height) * x.width * 3)
            throw ContractError("malformed image passed to detector");
        ForwardState st;
        st.img_h = x.height;
        st.img_w = x.width;
        st.input = detail::image_to_tensor(x);
        const nn::Tensor* cur = &st.input;
        for (const auto& layer : layers_) {
            st.pre_act.push_back(layer.forward(*cur));
            st.act.push_back(nn::leaky_relu(st.pre_act.back()));
            cur = &st.act.back();
        }
        st.head = head_.forward(*cur);
        return st;
    }

    // Decodes every grid cell. Cell (r,c) index = r*grid_w + c.
    std::vector<Detection> decode_all(const ForwardState& st) const {
        int gh = st.head.h, gw = st.head.w;
        double sy = static_cast<double>(st.img_h) / gh;
        double sx = static_cast<double>(st.img_w) / gw;
        std::vector<Detection> out;
        int C = arch_.num_classes;
        for (int r = 0; r < gh; ++r) {
            for (int c = 0; c < gw; ++c) {
                double obj = nn::sigmoid(st.head.at(0, r, c));
                std::vector<double> cls(C);
                for (int k = 0; k < C; ++k) cls[k] = st.head.at(1 + k, r, c);
                double cx = (c + nn::sigmoid(st.head.at(1 + C, r, c))) * sx;
                double cy = (r + nn::sigmoid(st.head.at(1 + C + 1, r, c))) * sy;
                double bw = nn::sigmoid(st.head.at(1 + C + 2, r, c)) * st.img_w;
                double bh = nn::sigmoid(st.head.at(1 + C + 3, r, c)) * st.img_h;
                bw = std::max(bw, 1e-3);
                bh = std::max(bh, 1e-3);
                int cls_id = static_cast<int>(
                    std::max_element(cls.begin(), cls.end()) - cls.begin());
                out.emplace_back(BBox(cx - bw / 2, cy - bh / 2, cx + bw / 2,
                                      cy + bh / 2),
                                 cls_id, obj, std::move(cls), r * gw + c);
            }
        }
        return out;
    }

    // Confidence filter + per-class greedy NMS, deterministic ordering.
    DetectionSet select(std::vector<Detection> all, const std::string& image_id) const {
        std::vector<Detection> kept;
        for (auto& d : all)
            if (d.objectness >= arch_.conf_threshold) kept.push_back(std::move(d));
        std::stable_sort(kept.begin(), kept.end(),
                         [](const Detection& a, const Detection& b) {
                             if (a.objectness != b.objectness)
                                 return a.objectness > b.objectness;
                             return a.cell_index < b.cell_index;
                         });
        DetectionSet out;
        out.image_id = image_id;
        for (const auto& d : kept) {
            bool suppressed = false;
            for (const auto& k : out.detections)
                if (k.class_id == d.class_id && iou(k.box, d.box) > arch_.nms_iou) {
                    suppressed = true;
                    break;
                }
            if (!suppressed) out.detections.push_back(d);
        }
        return out;
    }

    DetectionSet detect(const Image& x) const override {
        return select(decode_all(forward(x)), x.source_id);
    }

    std::pair<DetectionSet, GradHandle> detect_with_grads(
        const Image& x) const override {
        auto st = std::make_shared<ForwardState>(forward(x));
        DetectionSet dets = select(decode_all(*st), x.source_id);
        std::vector<int> cells;
        for (const auto& d : dets.detections) cells.push_back(d.cell_index);

        GradHandle handle;
        handle.backprop = [this, st, cells](const std::vector<DetectionGrad>& gs) {
            if (gs.size() != cells.size())
                throw ContractError("detection grad count mismatch");
            nn::Tensor d_head(head_.out_ch, st->head.h, st->head.w);
            int gw = st->head.w;
            int C = arch_.num_classes;
            for (size_t i = 0; i < gs.size(); ++i) {
                int r = cells[i] / gw, c = cells[i] % gw;
                double obj = nn::sigmoid(st->head.at(0, r, c));
                d_head.at(0, r, c) += gs[i].d_objectness * obj * (1.0 - obj);
                if (!gs[i].d_class_scores.empty()) {
                    if (static_cast<int>(gs[i].d_class_scores.size()) != C)
                        throw ContractError("class grad length mismatch");
                    for (int k = 0; k < C; ++k)
                        d_head.at(1 + k, r, c) += gs[i].d_class_scores[k];
                }
            }
            return backward_to_image(*st, d_head);
        };
        return {std::move(dets), std::move(handle)};
    }

    std::vector<std::pair<double, std::vector<double>>> cell_outputs(
        const Image& x, const std::vector<int>& cells) const override {
        auto st = forward(x);
        int gw = st.head.w;
        int C = arch_.num_classes;
        std::vector<std::pair<double, std::vector<double>>> out;
        for (int cell : cells) {
            int r = cell / gw, c = cell % gw;
            if (r < 0 || r >= st.head.h || c < 0)
                throw ContractError("cell index out of range");
            std::vector<double> cls(C);
            for (int k = 0; k < C; ++k) cls[k] = st.head.at(1 + k, r, c);
            out.emplace_back(nn::sigmoid(st.head.at(0, r, c)), std::move(cls));
        }
        return out;
    }

    Image backward_to_image(const ForwardState& st, const nn::Tensor& d_head) const {
        const nn::Tensor& last =
            layers_.empty() ? st.input : st.act.back();
        nn::Tensor d = head_.backward_input(d_head, last.h, last.w);
        for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
            nn::leaky_relu_backward(st.pre_act[static_cast<size_t>(i)], d);
            const nn::Tensor& below =
                i == 0 ? st.input : st.act[static_cast<size_t>(i) - 1];
            d = layers_[static_cast<size_t>(i)].backward_input(d, below.h, below.w);
        }
        return detail::tensor_to_image_grad(d);
    }

    // -- persistence: JSON architecture descriptor + raw double blob --------

    void save(const std::string& prefix) const {
        nlohmann::json arch{{"model_id", arch_.model_id},
                            {"num_classes", arch_.num_classes},
                            {"input_size", arch_.input_size},
                            {"conf_threshold", arch_.conf_threshold},
                            {"nms_iou", arch_.nms_iou},
                            {"backbone", nlohmann::json::array()}};
        for (const auto& s : arch_.backbone)
            arch["backbone"].push_back(
                {{"out_ch", s.out_ch}, {"kernel", s.kernel}, {"stride", s.stride}});
        std::ofstream ja(prefix + ".arch.json");
        if (!ja) throw IoError("cannot write " + prefix + ".arch.json");
        ja << arch.dump(2) << "\n";

        std::ofstream blob(prefix + ".weights.bin", std::ios::binary);
        if (!blob) throw IoError("cannot write " + prefix + ".weights.bin");
        auto dump = [&](const std::vector<double>& v) {
            blob.write(reinterpret_cast<const char*>(v.data()),
                       static_cast<std::streamsize>(v.size() * sizeof(double)));
        };
        for (const auto& l : layers_) {
            dump(l.weights);
            dump(l.bias);
        }
        dump(head_.weights);
        dump(head_.bias);
    }

    static ToyGridDetector load(const std::string& prefix) {
        std::ifstream ja(prefix + ".arch.json");
        if (!ja) throw IoError("cannot read " + prefix + ".arch.json");
        nlohmann::json arch;
        try {
            ja >> arch;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad arch descriptor: " + std::string(e.what()));
        }
        ToyArch a;
        a.model_id = arch.at("model_id").get<std::string>();
        a.num_classes = arch.at("num_classes").get<int>();
        a.input_size = arch.at("input_size").get<int>();
        a.conf_threshold = arch.at("conf_threshold").get<double>();
        a.nms_iou = arch.at("nms_iou").get<double>();
        a.backbone.clear();
        for (const auto& s : arch.at("backbone"))
            a.backbone.push_back({s.at("out_ch").get<int>(),
                                  s.at("kernel").get<int>(),
                                  s.at("stride").get<int>()});
        ToyGridDetector det(a, 0);
        std::ifstream blob(prefix + ".weights.bin", std::ios::binary);
        if (!blob) throw IoError("cannot read " + prefix + ".weights.bin");
        auto slurp = [&](std::vector<double>& v) {
            blob.read(reinterpret_cast<char*>(v.data()),
                      static_cast<std::streamsize>(v.size() * sizeof(double)));
            if (!blob) throw FormatError("truncated weight blob: " + prefix);
        };
        for (auto& l : det.layers_) {
            slurp(l.weights);
            slurp(l.bias);
        }
        slurp(det.head_.weights);
        slurp(det.head_.bias);
        return det;
    }

    std::vector<nn::Conv2d>& layers() { return layers_; }
    const std::vector<nn::Conv2d>& layers() const { return layers_; }
    nn::Conv2d& head() { return head_; }
    const nn::Conv2d& head() const { return head_; }

private:
    ToyArch arch_;
    std::vector<nn::Conv2d> layers_;
    nn::Conv2d head_;
};

// ---------------------------------------------------------------------------
// Toy detector training on labeled data (synthetic shapes in practice).
// ---------------------------------------------------------------------------

struct ToyTrainOptions {
    int epochs = 60;
    double lr = 5e-3;
    double noobj_weight = 0.1;
    double box_weight = 5.0;
    double lr_step_factor = 0.3;  // applied at 60% and 85% of the epochs
    // Label smoothing on the class cross-entropy keeps class logit gaps
    // bounded instead of letting confidence saturate during long runs.
    double label_smoothing = 0.1;
    double min_val_map = 0.7;  // convergence gate when a val split is given
};

namespace detail {

struct ParamPack {
    std::vector<std::vector<double>*> chunks;

    size_t total() const {
        size_t n = 0;
        for (auto* c : chunks) n += c->size();
        return n;
    }
    std::vector<double> gather() const {
        std::vector<double> flat;
        flat.reserve(total());
        for (auto* c : chunks) flat.insert(flat.end(), c->begin(), c->end());
        return flat;
    }
    void scatter(const std::vector<double>& flat) {
        size_t off = 0;
        for (auto* c : chunks) {
            std::copy(flat.begin() + static_cast<long>(off),
                      flat.begin() + static_cast<long>(off + c->size()), c->begin());
            off += c->size();
        }
    }
};

inline ParamPack pack_params(ToyGridDetector& det) {
    ParamPack p;
    for (auto& l : det.layers()) {
        p.chunks.push_back(&l.weights);
        p.chunks.push_back(&l.bias);
    }
    p.chunks.push_back(&det.head().weights);
    p.chunks.push_back(&det.head().bias);
    return p;
}

}  // namespace detail

struct ToyTrainResult {
    ToyGridDetector detector;
    double val_map = -1.0;  // -1 when no validation split was given
    std::vector<double> epoch_losses;
};

inline ToyTrainResult train_toy_detector(
    const ToyArch& arch, const std::vector<Image>& train_images,
    const std::vector<GroundTruth>& train_gts, std::uint64_t seed, int epochs,
    const std::vector<Image>* val_images = nullptr,
    const std::vector<GroundTruth>* val_gts = nullptr,
    ToyTrainOptions opts = {}) {
    if (train_images.size() != train_gts.size())
        throw ContractError("train_toy_detector: images/gts size mismatch");
    if (train_images.size() < 100)
        throw ConfigError("toy detector training needs >= 100 labeled images");
    opts.epochs = epochs;

    ToyTrainResult res{ToyGridDetector(arch, seed), -1.0, {}};
    ToyGridDetector& det = res.detector;
    auto pack = detail::pack_params(det);
    std::vector<double> params = pack.gather();
    nn::Adam adam(params.size(), opts.lr);

    const int C = arch.num_classes;
    Rng order_rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<size_t> order(train_images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        // Step decay: a flat rate oscillates near the optimum on long runs.
        adam.lr = opts.lr;
        if (epoch >= opts.epochs * 6 / 10) adam.lr *= opts.lr_step_factor;
        if (epoch >= opts.epochs * 17 / 20) adam.lr *= opts.lr_step_factor;
        std::shuffle(order.begin(), order.end(), order_rng.engine());
        double epoch_loss = 0.0;
        for (size_t idx : order) {
            const Image& img = train_images[idx];
            const GroundTruth& gt = train_gts[idx];
            auto st = det.forward(img);
            int gh = st.head.h, gw = st.head.w;
            double sy = static_cast<double>(st.img_h) / gh;
            double sx = static_cast<double>(st.img_w) / gw;

            // Build cell targets.
            std::vector<int> t_cls(static_cast<size_t>(gh) * gw, -1);
            std::vector<double> t_box(static_cast<size_t>(gh) * gw * 4, 0.0);
            for (const auto& g : gt) {
                int c = std::min(gw - 1, std::max(0, static_cast<int>(g.box.cx() / sx)));
                int r = std::min(gh - 1, std::max(0, static_cast<int>(g.box.cy() / sy)));
                size_t cell = static_cast<size_t>(r) * gw + c;
                t_cls[cell] = g.class_id;
                t_box[cell * 4 + 0] = g.box.cx() / sx - c;
                t_box[cell * 4 + 1] = g.box.cy() / sy - r;
                t_box[cell * 4 + 2] = g.box.width() / st.img_w;
                t_box[cell * 4 + 3] = g.box.height() / st.img_h;
            }

            nn::Tensor d_head(det.head().out_ch, gh, gw);
            double loss = 0.0;
            for (int r = 0; r < gh; ++r) {
                for (int c = 0; c < gw; ++c) {
                    size_t cell = static_cast<size_t>(r) * gw + c;
                    bool pos = t_cls[cell] >= 0;
                    double tgt = pos ? 1.0 : 0.0;
                    double o = nn::sigmoid(st.head.at(0, r, c));
                    double w_obj = pos ? 1.0 : opts.noobj_weight;
                    loss += -w_obj * (tgt * std::log(std::max(o, 1e-12)) +
                                      (1 - tgt) * std::log(std::max(1 - o, 1e-12)));
                    d_head.at(0, r, c) = w_obj * (o - tgt);
                    if (!pos) continue;

                    // Class cross-entropy with label smoothing.
                    double mx = -1e300;
                    for (int k = 0; k < C; ++k)
                        mx = std::max(mx, st.head.at(1 + k, r, c));
                    double Z = 0.0;
                    for (int k = 0; k < C; ++k)
                        Z += std::exp(st.head.at(1 + k, r, c) - mx);
                    double s = opts.label_smoothing;
                    for (int k = 0; k < C; ++k) {
                        double p = std::exp(st.head.at(1 + k, r, c) - mx) / Z;
                        double tgt_k = k == t_cls[cell] ? 1.0 - s : s / (C - 1);
                        d_head.at(1 + k, r, c) = p - tgt_k;
                        loss += -tgt_k * std::log(std::max(p, 1e-12));
                    }
                    // Box regression in sigmoid space.
                    for (int b = 0; b < 4; ++b) {
                        double raw = st.head.at(1 + C + b, r, c);
                        double s = nn::sigmoid(raw);
                        double diff = s - t_box[cell * 4 + b];
                        loss += opts.box_weight * diff * diff;
                        d_head.at(1 + C + b, r, c) =
                            opts.box_weight * 2.0 * diff * s * (1.0 - s);
                    }
                }
            }
            epoch_loss += loss / (gh * gw);

            // Full backward pass accumulating weight gradients.
            std::vector<std::vector<double>> dw, db;
            for (const auto& l : det.layers()) {
                dw.emplace_back(l.weights.size(), 0.0);
                db.emplace_back(l.bias.size(), 0.0);
            }
            std::vector<double> dw_head(det.head().weights.size(), 0.0);
            std::vector<double> db_head(det.head().bias.size(), 0.0);

            const nn::Tensor& last =
                det.layers().empty() ? st.input : st.act.back();
            nn::Tensor d = det.head().backward(last, d_head, dw_head, db_head);
            for (int i = static_cast<int>(det.layers().size()) - 1; i >= 0; --i) {
                nn::leaky_relu_backward(st.pre_act[static_cast<size_t>(i)], d);
                const nn::Tensor& below =
                    i == 0 ? st.input : st.act[static_cast<size_t>(i) - 1];
                d = det.layers()[static_cast<size_t>(i)].backward(
                    below, d, dw[static_cast<size_t>(i)], db[static_cast<size_t>(i)]);
            }

            std::vector<double> grads;
            grads.reserve(params.size());
            for (size_t i = 0; i < det.layers().size(); ++i) {
                grads.insert(grads.end(), dw[i].begin(), dw[i].end());
                grads.insert(grads.end(), db[i].begin(), db[i].end());
            }
            grads.insert(grads.end(), dw_head.begin(), dw_head.end());
            grads.insert(grads.end(), db_head.begin(), db_head.end());

            adam.step(params, grads);
            pack.scatter(params);
        }
        res.epoch_losses.push_back(epoch_loss /
                                   static_cast<double>(train_images.size()));
    }

    if (val_images && val_gts) {
        std::vector<DetectionSet> preds;
        for (const auto& img : *val_images) preds.push_back(det.detect(img));
        auto mr = compute_map(preds, *val_gts);
        res.val_map = mr.has_ground_truth ? mr.map : 0.0;
        if (res.val_map < opts.min_val_map)
            throw NumericError(
                "toy detector failed to converge: val mAP " +
                std::to_string(res.val_map) + " < " +
                std::to_string(opts.min_val_map) + " after " +
                std::to_string(opts.epochs) + " epochs (final train loss " +
                std::to_string(res.epoch_losses.empty() ? -1.0
                                                        : res.epoch_losses.back()) +
                ")");
    }
    return res;
}

}  // namespace advpatch

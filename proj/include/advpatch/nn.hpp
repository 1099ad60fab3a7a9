#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "advpatch/common.hpp"

namespace advpatch::nn {

// Dense CHW tensor of doubles.
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_, double fill = 0.0)
        : c(c_), h(h_), w(w_),
          v(static_cast<size_t>(c_) * h_ * w_, fill) {}

    double& at(int ch, int r, int col) {
        return v[(static_cast<size_t>(ch) * h + r) * w + col];
    }
    double at(int ch, int r, int col) const {
        return v[(static_cast<size_t>(ch) * h + r) * w + col];
    }
    size_t size() const { return v.size(); }
    void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

// 2D convolution layer, SAME padding (pad = kernel/2), square kernel.
struct Conv2d {
    int in_ch = 0, out_ch = 0, kernel = 1, stride = 1;
    std::vector<double> weights;  // [out_ch][in_ch][kernel][kernel]
    std::vector<double> bias;     // [out_ch]

    Conv2d() = default;
    Conv2d(int in_c, int out_c, int k, int s)
        : in_ch(in_c), out_ch(out_c), kernel(k), stride(s),
          weights(static_cast<size_t>(out_c) * in_c * k * k, 0.0),
          bias(out_c, 0.0) {}

    void init_he(Rng& rng) {
        double std = std::sqrt(2.0 / (in_ch * kernel * kernel));
        for (double& w : weights) w = rng.normal(0.0, std);
        for (double& b : bias) b = 0.0;
    }

    int out_h(int in_h) const { return (in_h + stride - 1) / stride; }
    int out_w(int in_w) const { return (in_w + stride - 1) / stride; }

    double wat(int oc, int ic, int kr, int kc) const {
        return weights[((static_cast<size_t>(oc) * in_ch + ic) * kernel + kr) *
                           kernel +
                       kc];
    }
    double& wat(int oc, int ic, int kr, int kc) {
        return weights[((static_cast<size_t>(oc) * in_ch + ic) * kernel + kr) *
                           kernel +
                       kc];
    }

    Tensor forward(const Tensor& in) const {
        int oh = out_h(in.h), ow = out_w(in.w);
        int pad = kernel / 2;
        Tensor out(out_ch, oh, ow);
        for (int oc = 0; oc < out_ch; ++oc) {
            for (int r = 0; r < oh; ++r) {
                for (int col = 0; col < ow; ++col) {
                    double acc = bias[oc];
                    int ir0 = r * stride - pad;
                    int ic0 = col * stride - pad;
                    for (int ic = 0; ic < in_ch; ++ic) {
                        for (int kr = 0; kr < kernel; ++kr) {
                            int ir = ir0 + kr;
                            if (ir < 0 || ir >= in.h) continue;
                            for (int kc = 0; kc < kernel; ++kc) {
                                int icc = ic0 + kc;
                                if (icc < 0 || icc >= in.w) continue;
                                acc += wat(oc, ic, kr, kc) * in.at(ic, ir, icc);
                            }
                        }
                    }
                    out.at(oc, r, col) = acc;
                }
            }
        }
        return out;
    }

    // Gradient w.r.t. the layer input only (used for attack gradients).
    Tensor backward_input(const Tensor& d_out, int in_h, int in_w) const {
        int pad = kernel / 2;
        Tensor d_in(in_ch, in_h, in_w);
        for (int oc = 0; oc < out_ch; ++oc) {
            for (int r = 0; r < d_out.h; ++r) {
                for (int col = 0; col < d_out.w; ++col) {
                    double g = d_out.at(oc, r, col);
                    if (g == 0.0) continue;
                    int ir0 = r * stride - pad;
                    int ic0 = col * stride - pad;
                    for (int ic = 0; ic < in_ch; ++ic) {
                        for (int kr = 0; kr < kernel; ++kr) {
                            int ir = ir0 + kr;
                            if (ir < 0 || ir >= in_h) continue;
                            for (int kc = 0; kc < kernel; ++kc) {
                                int icc = ic0 + kc;
                                if (icc < 0 || icc >= in_w) continue;
                                d_in.at(ic, ir, icc) += g * wat(oc, ic, kr, kc);
                            }
                        }
                    }
                }
            }
        }
        return d_in;
    }

    // Full backward: accumulates weight/bias gradients and returns d_input.
    Tensor backward(const Tensor& in, const Tensor& d_out,
                    std::vector<double>& d_weights,
                    std::vector<double>& d_bias) const {
        int pad = kernel / 2;
        Tensor d_in(in_ch, in.h, in.w);
        for (int oc = 0; oc < out_ch; ++oc) {
            for (int r = 0; r < d_out.h; ++r) {
                for (int col = 0; col < d_out.w; ++col) {
                    double g = d_out.at(oc, r, col);
                    if (g == 0.0) continue;
                    d_bias[oc] += g;
                    int ir0 = r * stride - pad;
                    int ic0 = col * stride - pad;
                    for (int ic = 0; ic < in_ch; ++ic) {
                        for (int kr = 0; kr < kernel; ++kr) {
                            int ir = ir0 + kr;
                            if (ir < 0 || ir >= in.h) continue;
                            for (int kc = 0; kc < kernel; ++kc) {
                                int icc = ic0 + kc;
                                if (icc < 0 || icc >= in.w) continue;
                                double x = in.at(ic, ir, icc);
                                d_weights[((static_cast<size_t>(oc) * in_ch +
                                            ic) *
                                               kernel +
                                           kr) *
                                              kernel +
                                          kc] += g * x;
                                d_in.at(ic, ir, icc) += g * wat(oc, ic, kr, kc);
                            }
                        }
                    }
                }
            }
        }
        return d_in;
    }
};

constexpr double kLeakySlope = 0.1;

inline Tensor leaky_relu(const Tensor& in) {
    Tensor out = in;
    for (double& x : out.v) x = x > 0.0 ? x : kLeakySlope * x;
    return out;
}

// d_out is modified in place into d_in using the pre-activation values.
inline void leaky_relu_backward(const Tensor& pre_act, Tensor& d) {
    for (size_t i = 0; i < d.v.size(); ++i)
        if (pre_act.v[i] <= 0.0) d.v[i] *= kLeakySlope;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Adam over a flat parameter vector.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m, v;
    long t = 0;

    explicit Adam(size_t n = 0, double lr_ = 1e-3)
        : lr(lr_), m(n, 0.0), v(n, 0.0) {}

    void resize(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }

    void step(std::vector<double>& params, const std::vector<double>& grads) {
        ++t;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
            params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
};

}  // namespace advpatch::nn

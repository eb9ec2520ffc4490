// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "merid/autodiff.hpp"
#include "merid/image.hpp"
#include "merid/metrics.hpp"
#include "merid/nn.hpp"

namespace merid {

// Planar YUV image: Y in [0,1], U/V signed chroma centered at 0.
struct YuvImage {
    Tensor y, u, v; // each (H,W)

    int height() const { return y.dim(0); }
    int width() const { return y.dim(1); }
};

// BT.601 full-range (analog) transform; exact matrix inverse in yuv_to_rgb.
inline constexpr double kUScale = 0.492;
inline constexpr double kVScale = 0.877;

inline YuvImage rgb_to_yuv(const RgbImage& img) {
    int H = img.height(), W = img.width();
    YuvImage out{Tensor({H, W}), Tensor({H, W}), Tensor({H, W})};
    for (int yy = 0; yy < H; ++yy)
        for (int xx = 0; xx < W; ++xx) {
            double r = img.at(0, yy, xx), g = img.at(1, yy, xx), b = img.at(2, yy, xx);
            double luma = luma601(r, g, b);
            std::size_t i = static_cast<std::size_t>(yy) * W + xx;
            out.y.v[i] = luma;
            out.u.v[i] = kUScale * (b - luma);
            out.v.v[i] = kVScale * (r - luma);
        }
    return out;
}

inline RgbImage yuv_to_rgb(const YuvImage& yuv) {
    int H = yuv.height(), W = yuv.width();
    RgbImage out(H, W);
    for (int yy = 0; yy < H; ++yy)
        for (int xx = 0; xx < W; ++xx) {
            std::size_t i = static_cast<std::size_t>(yy) * W + xx;
            double y = yuv.y.v[i], u = yuv.u.v[i], v = yuv.v.v[i];
            double r = y + v / kVScale;
            double b = y + u / kUScale;
            double g = (y - 0.299 * r - 0.114 * b) / 0.587;
            out.at(0, yy, xx) = std::clamp(r, 0.0, 1.0);
            out.at(1, yy, xx) = std::clamp(g, 0.0, 1.0);
            out.at(2, yy, xx) = std::clamp(b, 0.0, 1.0);
        }
    return out;
}

// L = Gaussian low-pass of Y (sigma = radius/2, kernel 2*radius+1, edge
// replicate); H is the exact residual, so L + H == Y bit-wise.
struct LuminanceDecomposition {
    Tensor low;  // L
    Tensor high; // H = Y - L
};

inline LuminanceDecomposition decompose_luminance(const Tensor& y, int radius) {
    LuminanceDecomposition d;
    d.low = gaussian_blur_plane(y, radius);
    d.high = y;
    for (std::size_t i = 0; i < d.high.numel(); ++i) d.high.v[i] -= d.low.v[i];
    return d;
}

struct RetinexConfig {
    double g_min = 0.3;
    double g_max = 6.0;
    int blur_radius = 7;
    double eps = 1e-4;         // luminance-map division guard
    int f_hidden = 16;         // f_theta hidden channels
    int state_channels = 16;   // C_s
    int state_hidden = 16;     // h_theta hidden width
    double clamp_margin = 0.05;
};

// Everything decouple produces, spatially aligned with the input.
struct Decoupled {
    YuvImage yuv;
    LuminanceDecomposition lum;
    ad::Var gain;        // (1,H,W), in [g_min, g_max]
    ad::Var reflectance; // (3,H,W), clamped to [0,1] (straight-through)
    ad::Var lum_map;     // (3,H,W), >= 0 and finite
    ad::Var state;       // (C_s,H,W)
};

// Stage-1 illumination decoupling: bounded learnable gain on the luminance
// channel, reflectance reconstruction, enhancement-strength map and the
// illumination-state feature that conditions the attention stage.
class RetinexNet {
public:
    RetinexNet() = default;

    RetinexNet(const RetinexConfig& cfg, nn::ParamStore& ps, Rng& rng) : cfg_(cfg) {
        require(cfg.g_min > 0.0 && cfg.g_min < cfg.g_max, "gain bounds must satisfy 0 < g_min < g_max");
        f1_ = nn::Conv2d::create(ps, "retinex.f_theta.c1", 2, cfg.f_hidden, 3, rng);
        f2_ = nn::Conv2d::create(ps, "retinex.f_theta.c2", cfg.f_hidden, 1, 3, rng, /*zero_init=*/true);
        h1_ = nn::Conv2d::create(ps, "retinex.h_theta.c1", 5, cfg.state_hidden, 1, rng);
        h2_ = nn::Conv2d::create(ps, "retinex.h_theta.c2", cfg.state_hidden, cfg.state_channels, 1, rng);
    }

    const RetinexConfig& config() const { return cfg_; }

    // Sets f_theta to the configuration whose output gain is exactly 1.
    void set_identity_gain() {
        for (double& v : f1_.w->val.v) v = 0.0;
        for (double& v : f1_.b->val.v) v = 0.0;
        for (double& v : f2_.w->val.v) v = 0.0;
        double frac = (1.0 - cfg_.g_min) / (cfg_.g_max - cfg_.g_min);
        require(frac > 0.0 && frac < 1.0, "identity gain outside configured bounds");
        f2_.b->val.v[0] = std::log(frac / (1.0 - frac));
    }

    // g = g_min + sigmoid(f_theta(L,H)) * (g_max - g_min)
    ad::Var compute_gain(const LuminanceDecomposition& lum) const {
        require(lum.low.same_shape(lum.high), "compute_gain: L/H shape mismatch");
        int H = lum.low.dim(0), W = lum.low.dim(1);
        Tensor stack({2, H, W});
        std::copy(lum.low.v.begin(), lum.low.v.end(), stack.v.begin());
        std::copy(lum.high.v.begin(), lum.high.v.end(), stack.v.begin() + lum.low.numel());
        ad::Var x = ad::constant(std::move(stack));
        ad::Var f = f2_(ad::gelu(f1_(x)));
        return ad::add_scalar(ad::mul_scalar(ad::sigmoid(f), cfg_.g_max - cfg_.g_min), cfg_.g_min);
    }

    // R' = C^-1(Y*g, U, V) clamped to [0,1]; chroma untouched.
    ad::Var reconstruct_reflectance(const YuvImage& yuv, const ad::Var& gain, bool clamp = true) const {
        int H = yuv.height(), W = yuv.width();
        require(gain->val.rank() == 3 && gain->val.dim(1) == H && gain->val.dim(2) == W,
                "reconstruct_reflectance: shape mismatch");
        ad::Var y = ad::constant(Tensor({1, H, W}, yuv.y.v));
        ad::Var yg = ad::mul(y, gain);
        ad::Var u = ad::constant(Tensor({1, H, W}, yuv.u.v));
        ad::Var v = ad::constant(Tensor({1, H, W}, yuv.v.v));
        ad::Var r = ad::add(yg, ad::mul_scalar(v, 1.0 / kVScale));
        ad::Var b = ad::add(yg, ad::mul_scalar(u, 1.0 / kUScale));
        ad::Var g = ad::mul_scalar(
            ad::sub(yg, ad::add(ad::mul_scalar(r, 0.299), ad::mul_scalar(b, 0.114))), 1.0 / 0.587);
        ad::Var rgb = ad::concat_channels({r, g, b});
        return clamp ? ad::clamp01_st(rgb, cfg_.clamp_margin) : rgb;
    }

    // M = R' / max(I, eps), per channel
    ad::Var luminance_map(const ad::Var& reflectance, const RgbImage& input) const {
        require(reflectance->val.same_shape(input.t), "luminance_map: shape mismatch");
        Tensor recip = input.t;
        for (double& x : recip.v) x = 1.0 / std::max(x, cfg_.eps);
        return ad::mul(reflectance, ad::constant(std::move(recip)));
    }

    // F_illu = h_theta([L, R', log g]); log g is bounded away from zero by the
    // gain bounds, so no image intensity ever passes through a logarithm.
    ad::Var illumination_state(const Tensor& low, const ad::Var& reflectance, const ad::Var& gain) const {
        int H = low.dim(0), W = low.dim(1);
        ad::Var l = ad::constant(Tensor({1, H, W}, low.v));
        ad::Var stack = ad::concat_channels({l, reflectance, ad::log_(gain)});
        return h2_(ad::gelu(h1_(stack)));
    }

    Decoupled decouple(const RgbImage& image) const {
        Decoupled d;
        d.yuv = rgb_to_yuv(image);
        d.lum = decompose_luminance(d.yuv.y, cfg_.blur_radius);
        d.gain = compute_gain(d.lum);
        d.reflectance = reconstruct_reflectance(d.yuv, d.gain);
        d.lum_map = luminance_map(d.reflectance, image);
        d.state = illumination_state(d.lum.low, d.reflectance, d.gain);
        return d;
    }

private:
    RetinexConfig cfg_;
    nn::Conv2d f1_, f2_, h1_, h2_;
};

} // namespace merid

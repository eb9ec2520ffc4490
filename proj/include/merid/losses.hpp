// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "merid/autodiff.hpp"
#include "merid/metrics.hpp"

namespace merid {

inline ad::Var l1_ad(const ad::Var& a, const ad::Var& b) { return ad::mean_all(ad::abs_(ad::sub(a, b))); }

// Differentiable SSIM on (3,H,W) maps; same window, stabilizers and zero-pad
// filtering as metrics::ssim, so the two routes agree numerically.
inline ad::Var ssim_ad(const ad::Var& a, const ad::Var& b, int window = 11, double sigma = 1.5) {
    require(a->val.same_shape(b->val), "ssim_ad: shape mismatch");
    int C = a->val.dim(0);
    auto win = ssim_detail::gaussian_window(window, sigma);
    Tensor wt({C, window, window});
    for (int c = 0; c < C; ++c)
        std::copy(win.begin(), win.end(), wt.v.begin() + static_cast<std::ptrdiff_t>(c) * window * window);
    ad::Var w = ad::constant(std::move(wt));
    const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    ad::Var mu_a = ad::depthwise_conv2d(a, w);
    ad::Var mu_b = ad::depthwise_conv2d(b, w);
    ad::Var e_aa = ad::depthwise_conv2d(ad::mul(a, a), w);
    ad::Var e_bb = ad::depthwise_conv2d(ad::mul(b, b), w);
    ad::Var e_ab = ad::depthwise_conv2d(ad::mul(a, b), w);
    ad::Var mu_ab = ad::mul(mu_a, mu_b);
    ad::Var va = ad::sub(e_aa, ad::mul(mu_a, mu_a));
    ad::Var vb = ad::sub(e_bb, ad::mul(mu_b, mu_b));
    ad::Var cov = ad::sub(e_ab, mu_ab);
    ad::Var num = ad::mul(ad::add_scalar(ad::mul_scalar(mu_ab, 2.0), C1),
                          ad::add_scalar(ad::mul_scalar(cov, 2.0), C2));
    ad::Var den = ad::mul(ad::add_scalar(ad::add(ad::mul(mu_a, mu_a), ad::mul(mu_b, mu_b)), C1),
                          ad::add_scalar(ad::add(va, vb), C2));
    return ad::mean_all(ad::div(num, den));
}

// (1-lambda) * L1 + lambda * (1 - SSIM); the splatting training objective and
// also the base-stage enhancement objective (with its own lambda).
inline ad::Var photometric_loss_ad(const ad::Var& rendered, const ad::Var& target, double lambda) {
    require(lambda >= 0.0 && lambda <= 1.0, "loss lambda must be in [0,1]");
    ad::Var l1 = l1_ad(rendered, target);
    if (lambda == 0.0)
        return l1;
    ad::Var ds = ad::add_scalar(ad::neg(ssim_ad(rendered, target)), 1.0);
    return ad::add(ad::mul_scalar(l1, 1.0 - lambda), ad::mul_scalar(ds, lambda));
}

// Plain-number route used for reporting.
inline double photometric_loss(const RgbImage& rendered, const RgbImage& target, double lambda) {
    require(rendered.t.same_shape(target.t), "loss: shape mismatch");
    require(lambda >= 0.0 && lambda <= 1.0, "loss lambda must be in [0,1]");
    double l1 = 0.0;
    for (std::size_t i = 0; i < rendered.t.numel(); ++i) l1 += std::abs(rendered.t.v[i] - target.t.v[i]);
    l1 /= static_cast<double>(rendered.t.numel());
    if (lambda == 0.0)
        return l1;
    return (1.0 - lambda) * l1 + lambda * (1.0 - ssim(rendered, target));
}

} // namespace merid

// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "merid/autodiff.hpp"
#include "merid/image.hpp"
#include "merid/nn.hpp"

namespace merid {

struct HeadConfig {
    int hidden = 16;
    double clamp_margin = 1.0;
    double step_size = 1e-3; // adaptation base learning rate, cosine-decayed
};

// Stage-2 channel correction: R = clamp(R0 + psi(R0)) with psi two pointwise
// projections around a GELU. The receptive field is exactly one pixel and the
// final projection starts at zero, so the untrained head is the identity.
class ReflectionHead {
public:
    ReflectionHead() = default;

    ReflectionHead(const HeadConfig& cfg, nn::ParamStore& ps, Rng& rng) : cfg_(cfg) {
        c1_ = nn::Conv2d::create(ps, "head.psi.c1", 3, cfg.hidden, 1, rng);
        c2_ = nn::Conv2d::create(ps, "head.psi.c2", cfg.hidden, 3, 1, rng, /*zero_init=*/true);
    }

    const HeadConfig& config() const { return cfg_; }

    ad::Var apply(const ad::Var& r0, bool clamp = true) const {
        ad::Var out = ad::add(r0, c2_(ad::gelu(c1_(r0))));
        return clamp ? ad::clamp01_st(out, cfg_.clamp_margin) : out;
    }

    RgbImage apply(const RgbImage& r0) const {
        ad::NoGrad ng;
        return RgbImage(apply(ad::constant(r0.t))->val);
    }

private:
    HeadConfig cfg_;
    nn::Conv2d c1_, c2_;
};

struct AdaptConfig {
    int k_views = 10;
    int iters = 800;
    double step_size = 1e-3;
    std::uint64_t seed = 0;

    void validate() const {
        require(k_views >= 1, "adapt: k_views must be >= 1");
        require(iters >= 1, "adapt: iters must be >= 1");
        require(step_size > 0.0, "adapt: step size must be positive");
    }
};

// Few-shot adaptation. The enhancer is frozen: R0 for every pair is computed
// once outside the loop (the head is the only trainable component), and cfg
// iterations of Adam on mean L1(apply(R0), normal) averaged over the pairs
// update head_params in place.
inline void adapt_head(const ReflectionHead& head, nn::ParamStore& head_params,
                       const std::vector<std::pair<RgbImage, RgbImage>>& r0_and_target,
                       const AdaptConfig& cfg,
                       const std::function<void(int, double)>& progress = nullptr) {
    cfg.validate();
    require(!r0_and_target.empty(), "adapt: no view pairs");
    std::vector<ad::Var> r0s, targets;
    for (const auto& [r0, target] : r0_and_target) {
        require(r0.t.same_shape(target.t), "adapt: pair shape mismatch");
        r0s.push_back(ad::constant(r0.t));
        targets.push_back(ad::constant(target.t));
    }
    nn::Adam opt(cfg.step_size);
    auto params = head_params.all();
    for (int it = 0; it < cfg.iters; ++it) {
        head_params.zero_grad();
        ad::Var total = nullptr;
        for (std::size_t i = 0; i < r0s.size(); ++i) {
            ad::Var li = ad::mean_all(ad::abs_(ad::sub(head.apply(r0s[i]), targets[i])));
            total = total ? ad::add(total, li) : li;
        }
        ad::Var loss = ad::mul_scalar(total, 1.0 / static_cast<double>(r0s.size()));
        if (!std::isfinite(loss->val.v[0]))
            fail("adapt: non-finite loss at iteration %d", it);
        ad::backward(loss);
        opt.set_lr(nn::cosine_lr(cfg.step_size, it, cfg.iters));
        opt.step(params);
        if (progress)
            progress(it, loss->val.v[0]);
    }
}

} // namespace merid

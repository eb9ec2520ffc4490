// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "merid/config.hpp"
#include "merid/isfga.hpp"
#include "merid/losses.hpp"
#include "merid/reflection_head.hpp"
#include "merid/retinex.hpp"

namespace merid {

struct EnhanceDiagnostics {
    Tensor gain;     // (1,H,W)
    Tensor lum_map;  // (3,H,W)
    Tensor state;    // (C_s,H,W)
    AttnDebug attn;
};

// The full trainable pipeline: Retinex decoupling, IS-FGA denoiser and the
// per-scene reflection head, each with its own parameter store so the
// checkpoint sections and the adaptation freeze are structural.
class MeridModel {
public:
    explicit MeridModel(const PipelineConfig& cfg) : cfg_(cfg) {
        cfg_.sync_toggles();
        Rng rng(cfg_.seed ^ 0x9e3779b9ULL);
        retinex_ = RetinexNet(cfg_.retinex, retinex_params_, rng);
        unet_ = IsfgaUnet(cfg_.isfga, cfg_.retinex.state_channels, isfga_params_, rng);
        head_ = ReflectionHead(cfg_.head, head_params_, rng);
    }

    const PipelineConfig& config() const { return cfg_; }
    RetinexNet& retinex() { return retinex_; }
    const IsfgaUnet& unet() const { return unet_; }
    ReflectionHead& head() { return head_; }
    const ReflectionHead& head() const { return head_; }

    nn::ParamStore& retinex_params() { return retinex_params_; }
    nn::ParamStore& isfga_params() { return isfga_params_; }
    nn::ParamStore& head_params() { return head_params_; }
    const nn::ParamStore& retinex_params() const { return retinex_params_; }
    const nn::ParamStore& isfga_params() const { return isfga_params_; }
    const nn::ParamStore& head_params() const { return head_params_; }

    long step = 0;

    // Stage-1+2 enhancement producing R0. With decoupling disabled (ablation
    // baseline) the denoiser sees the raw input, a unit luminance map and a
    // zero illumination state.
    ad::Var enhance_var(const RgbImage& low, AttnDebug* dbg = nullptr,
                        EnhanceDiagnostics* diag = nullptr) const {
        int H = low.height(), W = low.width();
        ad::Var refl, lmap, state;
        ad::Var gain;
        if (cfg_.toggles.erid) {
            Decoupled d = retinex_.decouple(low);
            refl = d.reflectance;
            lmap = d.lum_map;
            state = d.state;
            gain = d.gain;
        } else {
            refl = ad::constant(low.t);
            lmap = ad::constant(Tensor::full({3, H, W}, 1.0));
            state = ad::constant(Tensor::zeros({cfg_.retinex.state_channels, H, W}));
        }
        ad::Var out = unet_.forward(low, refl, lmap, state, dbg);
        if (diag) {
            diag->gain = gain ? gain->val : Tensor::full({1, H, W}, 1.0);
            diag->lum_map = lmap->val;
            diag->state = state->val;
            if (dbg)
                diag->attn = *dbg;
        }
        return out;
    }

    // Frozen-weight inference; applies the reflection head when enabled.
    RgbImage enhance(const RgbImage& low, bool with_head, EnhanceDiagnostics* diag = nullptr) const {
        ad::NoGrad ng;
        AttnDebug dbg;
        ad::Var r0 = enhance_var(low, diag ? &dbg : nullptr, diag);
        if (with_head && cfg_.toggles.rf_head)
            return RgbImage(head_.apply(r0)->val);
        return RgbImage(r0->val);
    }

    std::vector<ad::Var> trainable_base_params() const {
        std::vector<ad::Var> params;
        if (cfg_.toggles.erid)
            for (const auto& p : retinex_params_.all()) params.push_back(p);
        for (const auto& p : isfga_params_.all()) params.push_back(p);
        return params;
    }

    void zero_grad_base() {
        retinex_params_.zero_grad();
        isfga_params_.zero_grad();
    }

private:
    PipelineConfig cfg_;
    nn::ParamStore retinex_params_, isfga_params_, head_params_;
    RetinexNet retinex_;
    IsfgaUnet unet_;
    ReflectionHead head_;
};

// Base-stage objective: L1(R0, normal) + w * (1 - SSIM(R0, normal)).
inline ad::Var base_loss_ad(const ad::Var& r0, const ad::Var& target, double dssim_weight) {
    ad::Var l1 = l1_ad(r0, target);
    if (dssim_weight == 0.0)
        return l1;
    ad::Var ds = ad::add_scalar(ad::neg(ssim_ad(r0, target)), 1.0);
    return ad::add(l1, ad::mul_scalar(ds, dssim_weight));
}

} // namespace merid

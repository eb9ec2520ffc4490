// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "merid/autodiff.hpp"
#include "merid/nn.hpp"
#include "merid/retinex.hpp"

namespace merid {

struct IsfgaConfig {
    int scales = 3;
    std::vector<int> widths = {32, 64, 128}; // non-decreasing with depth
    int heads = 4;
    std::vector<int> band_kernels = {3, 5, 7}; // one depthwise-separable operator per band
    int window = 8;              // finest-scale attention window
    std::size_t max_tokens = 4096; // full-attention score-matrix budget
    int cond_dim = 16;           // phi(F_illu) condition vector size
    int fb_hidden = 16;
    bool energy_full_scalar = false; // reduce band energy over channels too
    double clamp_margin = 1.0;
    bool use_isfga = true;       // false: plain multi-head attention (ablation)
    bool use_decoupling = true;  // false: baseline fed with the raw input only

    void validate() const {
        require(scales >= 2, "need at least 2 scales");
        require(static_cast<int>(widths.size()) == scales, "widths must list one entry per scale");
        for (std::size_t i = 1; i < widths.size(); ++i)
            require(widths[i] >= widths[i - 1], "widths must be non-decreasing with depth");
        for (int w : widths) require(w % heads == 0, "channel width must be divisible by head count");
        require(!band_kernels.empty(), "need at least one band");
        for (std::size_t i = 1; i < band_kernels.size(); ++i)
            require(band_kernels[i] > band_kernels[i - 1], "band kernels must be strictly increasing");
    }
};

// Captured attention internals (score matrices per head) for the Q/K
// non-interference checks and the debug dumps.
struct AttnDebug {
    std::vector<Tensor> scores;
    std::vector<Tensor> gates;
    std::vector<double> band_energy;
};

// One IS-FGA block: attention whose value path is band-modulated and gated by
// the illumination state, followed by a convolutional feed-forward residual.
class IsfgaBlock {
public:
    static IsfgaBlock create(nn::ParamStore& ps, const std::string& name, int ch, int state_ch,
                             const IsfgaConfig& cfg, Rng& rng) {
        IsfgaBlock b;
        b.ch_ = ch;
        b.heads_ = cfg.heads;
        b.cfg_ = cfg;
        b.ln1_ = nn::LayerNorm::create(ps, name + ".ln1", ch);
        b.wq_ = nn::Conv2d::create(ps, name + ".wq", ch, ch, 1, rng);
        b.wk_ = nn::Conv2d::create(ps, name + ".wk", ch, ch, 1, rng);
        b.wv_ = nn::Conv2d::create(ps, name + ".wv", ch, ch, 1, rng);
        b.wout_ = nn::Conv2d::create(ps, name + ".wout", ch, ch, 1, rng, /*zero_init=*/true);
        if (cfg.use_isfga) {
            for (std::size_t i = 0; i < cfg.band_kernels.size(); ++i) {
                std::string bn = name + ".band" + std::to_string(i);
                b.band_dw_.push_back(nn::DepthwiseConv2d::create(ps, bn + ".dw", ch, cfg.band_kernels[i], rng));
                b.band_pw_.push_back(nn::Conv2d::create(ps, bn + ".pw", ch, ch, 1, rng));
                int e_dim = cfg.energy_full_scalar ? 1 : cfg.heads;
                b.fb1_.push_back(nn::Dense::create(ps, bn + ".f1", e_dim + cfg.cond_dim, cfg.fb_hidden, rng));
                b.fb2_.push_back(nn::Dense::create(ps, bn + ".f2", cfg.fb_hidden, ch, rng, /*zero_init=*/true));
            }
            b.phi_ = nn::Dense::create(ps, name + ".phi", state_ch, cfg.cond_dim, rng);
            b.gate_proj_ = nn::Conv2d::create(ps, name + ".gate", state_ch, ch, 1, rng);
        }
        b.ln2_ = nn::LayerNorm::create(ps, name + ".ln2", ch);
        b.ffn1_ = nn::Conv2d::create(ps, name + ".ffn1", ch, ch, 3, rng);
        b.ffn2_ = nn::Conv2d::create(ps, name + ".ffn2", ch, ch, 3, rng, /*zero_init=*/true);
        return b;
    }

    // F_b = H_b(V), one shape-preserving depthwise-separable operator per
    // band. Reflect padding keeps the operators mean-preserving at borders.
    std::vector<ad::Var> band_decompose(const ad::Var& v) const {
        require(!band_dw_.empty(), "band operators are disabled in this configuration");
        int H = v->val.dim(1), W = v->val.dim(2);
        std::vector<ad::Var> bands;
        for (std::size_t i = 0; i < band_dw_.size(); ++i) {
            int k = band_dw_[i].w->val.dim(1);
            if (k > H || k > W)
                fail("band kernel %d larger than feature map %dx%d", k, W, H);
            int r = k / 2;
            ad::Var padded = r > 0 ? ad::pad_reflect(v, r, r, r, r) : v;
            ad::Var filtered = band_dw_[i](padded);
            if (r > 0)
                filtered = ad::slice_spatial(filtered, r, r, H, W);
            bands.push_back(band_pw_[i](filtered));
        }
        return bands;
    }

    // V_spec = V + sum_b f_b(E[H_b(V)], phi(F_illu)) . H_b(V)
    ad::Var modulate_values(const ad::Var& v, const std::vector<ad::Var>& bands, const ad::Var& state,
                            AttnDebug* dbg = nullptr) const {
        require(state->val.dim(1) == v->val.dim(1) && state->val.dim(2) == v->val.dim(2),
                "modulate_values: state misaligned with values");
        ad::Var cond = ad::gelu(phi_(ad::spatial_mean(state)));
        ad::Var out = v;
        for (std::size_t i = 0; i < bands.size(); ++i) {
            ad::Var energy = reduce_energy(bands[i]);
            if (dbg)
                for (double e : energy->val.v) dbg->band_energy.push_back(e);
            ad::Var coef = fb2_[i](ad::gelu(fb1_[i](ad::concat_vec(energy, cond))));
            out = ad::add(out, ad::scale_channels(bands[i], coef));
        }
        return out;
    }

    // softmax(Q K^T / sqrt(d)) (V_spec . gate), heads over flattened tokens
    ad::Var gated_attention(const ad::Var& x, const ad::Var& state, AttnDebug* dbg = nullptr) const {
        ad::Var q = wq_(x), k = wk_(x), v = wv_(x);
        ad::Var vals = v;
        if (cfg_.use_isfga) {
            vals = modulate_values(v, band_decompose(v), state, dbg);
            ad::Var gate = ad::sigmoid(gate_proj_(state));
            if (dbg)
                dbg->gates.push_back(gate->val);
            vals = ad::mul(vals, gate);
        }
        return wout_(heads_attention(q, k, vals, dbg));
    }

    ad::Var forward(const ad::Var& x, const ad::Var& state, bool windowed, AttnDebug* dbg = nullptr) const {
        ad::Var h = ln1_(x);
        ad::Var attn;
        if (windowed)
            attn = windowed_attention(h, state, dbg);
        else {
            std::size_t tokens = static_cast<std::size_t>(h->val.dim(1)) * h->val.dim(2);
            if (tokens > cfg_.max_tokens)
                fail("attention over %zu tokens exceeds the %zu-token budget; use windowed attention or a "
                     "deeper scale",
                     tokens, cfg_.max_tokens);
            attn = gated_attention(h, state, dbg);
        }
        ad::Var y = ad::add(x, attn);
        return ad::add(y, ffn2_(ad::gelu(ffn1_(ln2_(y)))));
    }

private:
    ad::Var reduce_energy(const ad::Var& band) const {
        // mean over head-dim and spatial axes: one scalar per head (channel
        // group); the full-scalar alternative also reduces over heads
        ad::Var per_channel = ad::spatial_mean(band);
        int groups = cfg_.energy_full_scalar ? 1 : heads_;
        int per = ch_ / groups;
        Tensor avg({groups, ch_});
        for (int g = 0; g < groups; ++g)
            for (int c = 0; c < per; ++c) avg.v[static_cast<std::size_t>(g) * ch_ + g * per + c] = 1.0 / per;
        return ad::dense(per_channel, ad::constant(std::move(avg)), nullptr);
    }

    ad::Var heads_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, AttnDebug* dbg) const {
        int H = q->val.dim(1), W = q->val.dim(2);
        int d = ch_ / heads_;
        double scale = 1.0 / std::sqrt(static_cast<double>(d));
        std::vector<ad::Var> outs;
        for (int h = 0; h < heads_; ++h) {
            ad::Var qh = ad::transpose2d(ad::reshape(ad::slice_channels(q, h * d, d), {d, H * W}));
            ad::Var kh = ad::transpose2d(ad::reshape(ad::slice_channels(k, h * d, d), {d, H * W}));
            ad::Var vh = ad::transpose2d(ad::reshape(ad::slice_channels(v, h * d, d), {d, H * W}));
            ad::Var scores = ad::softmax_rows(ad::mul_scalar(ad::matmul(qh, ad::transpose2d(kh)), scale));
            if (dbg)
                dbg->scores.push_back(scores->val);
            ad::Var oh = ad::reshape(ad::transpose2d(ad::matmul(scores, vh)), {d, H, W});
            outs.push_back(oh);
        }
        return ad::concat_channels(outs);
    }

    ad::Var windowed_attention(const ad::Var& x, const ad::Var& state, AttnDebug* dbg) const {
        int H = x->val.dim(1), W = x->val.dim(2);
        int win = cfg_.window;
        int ph = (win - H % win) % win, pw = (win - W % win) % win;
        ad::Var xp = (ph || pw) ? ad::pad_reflect(x, 0, ph, 0, pw) : x;
        ad::Var sp = (ph || pw) ? ad::pad_reflect(state, 0, ph, 0, pw) : state;
        int TY = xp->val.dim(1) / win, TX = xp->val.dim(2) / win;
        std::vector<ad::Var> tiles;
        for (int ty = 0; ty < TY; ++ty)
            for (int tx = 0; tx < TX; ++tx) {
                ad::Var xt = ad::slice_spatial(xp, ty * win, tx * win, win, win);
                ad::Var st = ad::slice_spatial(sp, ty * win, tx * win, win, win);
                tiles.push_back(gated_attention(xt, st, dbg));
            }
        ad::Var merged = ad::assemble_spatial(tiles, TY, TX);
        return (ph || pw) ? ad::slice_spatial(merged, 0, 0, H, W) : merged;
    }

    int ch_ = 0;
    int heads_ = 0;
    IsfgaConfig cfg_;
    nn::LayerNorm ln1_, ln2_;
    nn::Conv2d wq_, wk_, wv_, wout_, gate_proj_, ffn1_, ffn2_;
    std::vector<nn::DepthwiseConv2d> band_dw_;
    std::vector<nn::Conv2d> band_pw_;
    std::vector<nn::Dense> fb1_, fb2_;
    nn::Dense phi_;
};

// U-shaped denoiser: encoder halves the resolution per scale, one IS-FGA
// block per scale on both paths, skip connections by concatenation, the
// luminance map rides along as extra input channels, and the output is
// reflectance_init plus a zero-initialized residual.
class IsfgaUnet {
public:
    IsfgaUnet() = default;

    IsfgaUnet(const IsfgaConfig& cfg, int state_channels, nn::ParamStore& ps, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        int s = cfg_.scales;
        stem_ = nn::Conv2d::create(ps, "isfga.stem", 9, cfg_.widths[0], 3, rng);
        for (int i = 0; i < s; ++i) {
            enc_.push_back(IsfgaBlock::create(ps, "isfga.enc" + std::to_string(i), cfg_.widths[static_cast<std::size_t>(i)],
                                              state_channels, cfg_, rng));
            if (i + 1 < s)
                down_.push_back(nn::Conv2d::create(ps, "isfga.down" + std::to_string(i),
                                                   cfg_.widths[static_cast<std::size_t>(i)],
                                                   cfg_.widths[static_cast<std::size_t>(i) + 1], 1, rng));
        }
        for (int i = s - 2; i >= 0; --i) {
            up_.push_back(nn::Conv2d::create(ps, "isfga.up" + std::to_string(i),
                                             cfg_.widths[static_cast<std::size_t>(i) + 1],
                                             cfg_.widths[static_cast<std::size_t>(i)], 1, rng));
            fuse_.push_back(nn::Conv2d::create(ps, "isfga.fuse" + std::to_string(i),
                                               2 * cfg_.widths[static_cast<std::size_t>(i)],
                                               cfg_.widths[static_cast<std::size_t>(i)], 1, rng));
            dec_.push_back(IsfgaBlock::create(ps, "isfga.dec" + std::to_string(i),
                                              cfg_.widths[static_cast<std::size_t>(i)], state_channels, cfg_, rng));
        }
        head_ = nn::Conv2d::create(ps, "isfga.head", cfg_.widths[0], 3, 3, rng, /*zero_init=*/true);
    }

    const IsfgaConfig& config() const { return cfg_; }

    // All inputs spatially aligned at full resolution: the low image, the
    // stage-1 reflectance, the luminance map and the illumination state.
    ad::Var forward(const RgbImage& low, const ad::Var& reflectance_init, const ad::Var& lum_map,
                    const ad::Var& state, AttnDebug* dbg = nullptr) const {
        int H = low.height(), W = low.width();
        require(reflectance_init->val.dim(1) == H && reflectance_init->val.dim(2) == W,
                "unet_forward: reflectance misaligned");
        require(lum_map->val.dim(1) == H && lum_map->val.dim(2) == W, "unet_forward: luminance map misaligned");
        require(state->val.dim(1) == H && state->val.dim(2) == W, "unet_forward: state misaligned");

        int div = 1 << (cfg_.scales - 1);
        int ph = (div - H % div) % div, pw = (div - W % div) % div;
        require(ph < H && pw < W, "unet_forward: input too small for the configured scale count");

        // log compression keeps the open-ended amplification ratios at a
        // scale the convolutions can digest (mirrors the log g channel)
        ad::Var m_in = ad::log_(ad::add_scalar(lum_map, 1.0));
        ad::Var x = ad::concat_channels({ad::constant(low.t), reflectance_init, m_in});
        ad::Var st = state;
        if (ph || pw) {
            x = ad::pad_reflect(x, 0, ph, 0, pw);
            st = ad::pad_reflect(st, 0, ph, 0, pw);
        }
        x = stem_(x);

        // encoder; the state pyramid is downsampled from full resolution
        std::vector<ad::Var> skips;
        std::vector<ad::Var> states{st};
        for (int i = 1; i < cfg_.scales; ++i) states.push_back(ad::avg_pool2(states.back()));
        for (int i = 0; i < cfg_.scales; ++i) {
            x = enc_[static_cast<std::size_t>(i)].forward(x, states[static_cast<std::size_t>(i)], i == 0, dbg);
            if (i + 1 < cfg_.scales) {
                skips.push_back(x);
                x = down_[static_cast<std::size_t>(i)](ad::avg_pool2(x));
            }
        }
        // decoder
        for (int k = 0; k < cfg_.scales - 1; ++k) {
            int i = cfg_.scales - 2 - k; // target scale
            x = up_[static_cast<std::size_t>(k)](ad::upsample2_nearest(x));
            x = fuse_[static_cast<std::size_t>(k)](ad::concat_channels(x, skips[static_cast<std::size_t>(i)]));
            x = dec_[static_cast<std::size_t>(k)].forward(x, states[static_cast<std::size_t>(i)], i == 0, dbg);
        }
        ad::Var residual = head_(x);
        if (ph || pw)
            residual = ad::slice_spatial(residual, 0, 0, H, W);
        return ad::clamp01_st(ad::add(reflectance_init, residual), cfg_.clamp_margin);
    }

    const IsfgaBlock& block(int i) const { return enc_[static_cast<std::size_t>(i)]; }

private:
    IsfgaConfig cfg_;
    nn::Conv2d stem_, head_;
    std::vector<IsfgaBlock> enc_, dec_;
    std::vector<nn::Conv2d> down_, up_, fuse_;
};

} // namespace merid

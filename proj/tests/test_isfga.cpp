// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "merid/isfga.hpp"

#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace merid;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

struct BlockFixture {
    IsfgaConfig cfg;
    nn::ParamStore ps;
    IsfgaBlock block;

    explicit BlockFixture(int ch = 8, int heads = 4, std::uint64_t seed = 1, std::vector<int> kernels = {3, 5, 7}) {
        cfg.heads = heads;
        cfg.band_kernels = std::move(kernels);
        cfg.widths = {ch, ch, ch};
        Rng rng(seed);
        block = IsfgaBlock::create(ps, "blk", ch, 6, cfg, rng);
    }

    void set_identity_band(std::size_t b) {
        auto dw = ps.get("blk.band" + std::to_string(b) + ".dw.w");
        int k = dw->val.dim(1);
        for (double& v : dw->val.v) v = 0.0;
        for (int c = 0; c < dw->val.dim(0); ++c) dw->val.v[(static_cast<std::size_t>(c) * k + k / 2) * k + k / 2] = 1.0;
        auto pw = ps.get("blk.band" + std::to_string(b) + ".pw.w");
        for (double& v : pw->val.v) v = 0.0;
        int C = pw->val.dim(0);
        for (int c = 0; c < C; ++c) pw->val.v[(static_cast<std::size_t>(c) * C + c)] = 1.0;
        for (double& v : ps.get("blk.band" + std::to_string(b) + ".pw.b")->val.v) v = 0.0;
    }

    void saturate_gate_open() {
        for (double& v : ps.get("blk.gate.w")->val.v) v = 0.0;
        for (double& v : ps.get("blk.gate.b")->val.v) v = 40.0; // sigmoid -> 1
    }
};

} // namespace

TEST_CASE("band decomposition with identity and averaging kernels", "[isfga]") {
    BlockFixture f(6, 2, 3);
    Rng rng(4);
    ad::Var v = ad::constant(random_tensor(rng, {6, 7, 9}));
    for (std::size_t b = 0; b < f.cfg.band_kernels.size(); ++b) f.set_identity_band(b);
    auto bands = f.block.band_decompose(v);
    REQUIRE(bands.size() == 3);
    for (const auto& fb : bands) CHECK(max_abs_diff(fb->val, v->val) == 0.0);

    // averaging depthwise kernels keep constants constant
    for (std::size_t b = 0; b < 3; ++b) {
        auto dw = f.ps.get("blk.band" + std::to_string(b) + ".dw.w");
        int k = dw->val.dim(1);
        for (double& x : dw->val.v) x = 1.0 / (k * k);
    }
    ad::Var c = ad::constant(Tensor::full({6, 9, 11}, 0.37));
    for (const auto& fb : f.block.band_decompose(c))
        for (double x : fb->val.v) CHECK(x == Catch::Approx(0.37).margin(1e-12));

    // the default configuration uses three bands with kernels 3, 5, 7
    IsfgaConfig def;
    CHECK(def.band_kernels == std::vector<int>{3, 5, 7});
}

TEST_CASE("value modulation is an additive residual off at init", "[isfga]") {
    BlockFixture f(8, 4, 5);
    Rng rng(6);
    ad::Var v = ad::constant(random_tensor(rng, {8, 8, 8}));
    ad::Var state = ad::constant(random_tensor(rng, {6, 8, 8}));
    // f_b final layers are zero-initialized: V_spec == V exactly
    ad::Var vs = f.block.modulate_values(v, f.block.band_decompose(v), state);
    CHECK(max_abs_diff(vs->val, v->val) == 0.0);
}

TEST_CASE("single identity band with coefficient -1 cancels the values", "[isfga]") {
    BlockFixture f(4, 2, 7, std::vector<int>{3});
    f.set_identity_band(0);
    // force f_0 to output exactly -1 for every channel
    for (double& v : f.ps.get("blk.band0.f2.w")->val.v) v = 0.0;
    for (double& v : f.ps.get("blk.band0.f2.b")->val.v) v = -1.0;
    Rng rng(8);
    ad::Var v = ad::constant(random_tensor(rng, {4, 5, 5}));
    ad::Var state = ad::constant(random_tensor(rng, {6, 5, 5}));
    ad::Var vs = f.block.modulate_values(v, f.block.band_decompose(v), state);
    for (double x : vs->val.v) CHECK(x == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("gated attention reduces to plain attention", "[isfga]") {
    Rng rng(9);
    for (int trial = 0; trial < 8; ++trial) {
        BlockFixture f(8, 4, 20 + static_cast<std::uint64_t>(trial));
        f.saturate_gate_open();
        Tensor x = random_tensor(rng, {8, 8, 8});
        ad::Var state = ad::constant(random_tensor(rng, {6, 8, 8}));
        ad::Var out = f.block.gated_attention(ad::constant(x), state);
        Tensor ref = testutil::reference_mha(f.ps, "blk", x, 4);
        CHECK(max_abs_diff(out->val, ref) < 1e-5);
    }
}

TEST_CASE("scores are row-stochastic and independent of the value path", "[isfga]") {
    BlockFixture f(8, 4, 31);
    Rng rng(10);
    Tensor x = random_tensor(rng, {8, 8, 8});
    ad::Var state = ad::constant(random_tensor(rng, {6, 8, 8}));

    AttnDebug before;
    f.block.gated_attention(ad::constant(x), state, &before);
    REQUIRE(before.scores.size() == 4);
    for (const auto& s : before.scores)
        for (int i = 0; i < s.dim(0); ++i) {
            double sum = 0;
            for (int j = 0; j < s.dim(1); ++j) sum += s.v[static_cast<std::size_t>(i) * s.dim(1) + j];
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }

    // randomize every modulation/gate/band parameter; Q/K scores must be
    // bit-identical (the value path never feeds the score matrix)
    for (const auto& name : f.ps.names())
        if (name.find("band") != std::string::npos || name.find("gate") != std::string::npos ||
            name.find("phi") != std::string::npos)
            for (double& v : f.ps.get(name)->val.v) v = rng.normal();
    AttnDebug after;
    f.block.gated_attention(ad::constant(x), state, &after);
    REQUIRE(after.scores.size() == before.scores.size());
    for (std::size_t i = 0; i < before.scores.size(); ++i)
        CHECK(max_abs_diff(before.scores[i], after.scores[i]) == 0.0);
}

TEST_CASE("single spatial token collapses softmax to one", "[isfga]") {
    BlockFixture f(4, 2, 33, std::vector<int>{1});
    Rng rng(11);
    Tensor x = random_tensor(rng, {4, 1, 1});
    ad::Var state = ad::constant(random_tensor(rng, {6, 1, 1}));
    AttnDebug dbg;
    ad::Var out = f.block.gated_attention(ad::constant(x), state, &dbg);
    for (const auto& s : dbg.scores) {
        REQUIRE(s.numel() == 1);
        CHECK(s.v[0] == Catch::Approx(1.0).margin(1e-12));
    }
    REQUIRE(dbg.gates.size() == 1);
    // output = W_out(gate * V_spec) for the lone token
    const Tensor& wv = f.ps.get("blk.wv.w")->val;
    const Tensor& bv = f.ps.get("blk.wv.b")->val;
    Tensor v({4, 1, 1});
    for (int co = 0; co < 4; ++co) {
        double acc = bv.v[static_cast<std::size_t>(co)];
        for (int ci = 0; ci < 4; ++ci) acc += wv.v[static_cast<std::size_t>(co) * 4 + ci] * x.v[static_cast<std::size_t>(ci)];
        v.v[static_cast<std::size_t>(co)] = acc;
    }
    const Tensor& wo = f.ps.get("blk.wout.w")->val;
    const Tensor& bo = f.ps.get("blk.wout.b")->val;
    for (int co = 0; co < 4; ++co) {
        double acc = bo.v[static_cast<std::size_t>(co)];
        for (int ci = 0; ci < 4; ++ci)
            acc += wo.v[static_cast<std::size_t>(co) * 4 + ci] * v.v[static_cast<std::size_t>(ci)] *
                   dbg.gates[0].v[static_cast<std::size_t>(ci)];
        CHECK(out->val.v[static_cast<std::size_t>(co)] == Catch::Approx(acc).margin(1e-12));
    }
}

TEST_CASE("a half-open gate halves the pre-bias output", "[isfga]") {
    Rng rng(13);
    BlockFixture f(8, 4, 35);
    // gate projection all-zero: sigmoid(0) = 0.5 everywhere
    for (double& v : f.ps.get("blk.gate.w")->val.v) v = 0.0;
    for (double& v : f.ps.get("blk.gate.b")->val.v) v = 0.0;
    Tensor x = random_tensor(rng, {8, 8, 8});
    ad::Var state = ad::constant(random_tensor(rng, {6, 8, 8}));
    ad::Var half = f.block.gated_attention(ad::constant(x), state);

    f.saturate_gate_open();
    ad::Var full = f.block.gated_attention(ad::constant(x), state);

    const Tensor& bo = f.ps.get("blk.wout.b")->val;
    std::size_t hw = 64;
    for (int c = 0; c < 8; ++c)
        for (std::size_t p = 0; p < hw; ++p) {
            double h = half->val.v[static_cast<std::size_t>(c) * hw + p] - bo.v[static_cast<std::size_t>(c)];
            double fl = full->val.v[static_cast<std::size_t>(c) * hw + p] - bo.v[static_cast<std::size_t>(c)];
            CHECK(h == Catch::Approx(0.5 * fl).margin(1e-6));
        }
}

TEST_CASE("gated attention gradients match finite differences", "[isfga][grad]") {
    Rng rng(17);
    BlockFixture f(8, 4, 37);
    Tensor x = random_tensor(rng, {8, 8, 8}, -0.5, 0.5);
    Tensor st = random_tensor(rng, {6, 8, 8}, -0.5, 0.5);
    // non-trivial modulation so f_b gradients are live
    for (double& v : f.ps.get("blk.band0.f2.w")->val.v) v = rng.normal() * 0.1;
    ad::Var state = ad::constant(st);
    auto loss = [&] {
        ad::Var out = f.block.gated_attention(ad::constant(x), state);
        return ad::mean_all(ad::mul(out, out));
    };
    std::vector<std::pair<std::string, ad::Var>> params;
    for (const char* name : {"blk.wq.w", "blk.wk.w", "blk.wv.w", "blk.band0.f2.w", "blk.band1.f1.w",
                             "blk.phi.w", "blk.gate.w", "blk.gate.b"})
        params.emplace_back(name, f.ps.get(name));
    auto res = testutil::check_gradients(loss, params, 1e-4, 1e-6);
    CAPTURE(res.worst_param, res.worst_analytic, res.worst_numeric);
    CHECK(res.max_rel_error < 1e-4);
}

namespace {

struct UnetFixture {
    IsfgaConfig cfg;
    nn::ParamStore ps;
    IsfgaUnet unet;

    explicit UnetFixture(std::uint64_t seed = 1, bool use_isfga = true) {
        cfg.scales = 3;
        cfg.widths = {8, 8, 16};
        cfg.heads = 2;
        cfg.window = 4;
        cfg.band_kernels = {1, 3};
        cfg.use_isfga = use_isfga;
        Rng rng(seed);
        unet = IsfgaUnet(cfg, 6, ps, rng);
    }
};

} // namespace

TEST_CASE("unet with zero residual head is the identity on the reflectance", "[isfga]") {
    UnetFixture f(41);
    Rng rng(19);
    RgbImage low(12, 16);
    for (double& v : low.t.v) v = rng.uniform(0.0, 0.3);
    Tensor refl = random_tensor(rng, {3, 12, 16}, 0.1, 0.9);
    ad::Var out = f.unet.forward(low, ad::constant(refl), ad::constant(Tensor::full({3, 12, 16}, 1.0)),
                                 ad::constant(random_tensor(rng, {6, 12, 16})));
    CHECK(max_abs_diff(out->val, refl) == 0.0); // head conv is zero-initialized
}

TEST_CASE("unet output matches input shape for awkward sizes", "[isfga]") {
    for (auto [h, w] : {std::pair{12, 16}, std::pair{10, 14}, std::pair{9, 13}, std::pair{18, 10}}) {
        UnetFixture f(43);
        Rng rng(20);
        RgbImage low(h, w);
        for (double& v : low.t.v) v = rng.uniform(0.0, 0.3);
        ad::Var out = f.unet.forward(low, ad::constant(random_tensor(rng, {3, h, w}, 0.1, 0.9)),
                                     ad::constant(Tensor::full({3, h, w}, 1.0)),
                                     ad::constant(random_tensor(rng, {6, h, w})));
        CHECK(out->val.dim(1) == h);
        CHECK(out->val.dim(2) == w);
        CHECK(out->val.all_finite());
    }
}

TEST_CASE("full attention respects the token budget", "[isfga]") {
    UnetFixture f(47);
    f.cfg.max_tokens = 4;
    Rng rng(21);
    nn::ParamStore ps;
    IsfgaUnet small(f.cfg, 6, ps, rng);
    RgbImage low(16, 16);
    CHECK_THROWS_WITH(small.forward(low, ad::constant(Tensor::full({3, 16, 16}, 0.5)),
                                    ad::constant(Tensor::full({3, 16, 16}, 1.0)),
                                    ad::constant(Tensor::zeros({6, 16, 16}))),
                      Catch::Matchers::ContainsSubstring("budget"));
}

TEST_CASE("unet trains against a denoising target", "[isfga]") {
    UnetFixture f(53);
    Rng rng(22);
    RgbImage low(16, 16), target(16, 16);
    for (int i = 0; i < 16 * 16 * 3; ++i) {
        double clean = rng.uniform(0.3, 0.7);
        target.t.v[static_cast<std::size_t>(i)] = clean;
        low.t.v[static_cast<std::size_t>(i)] = std::clamp(clean * 0.3 + rng.normal() * 0.02, 0.0, 1.0);
    }
    ad::Var tgt = ad::constant(target.t);
    nn::Adam opt(3e-3);
    auto params = f.ps.all();
    double first = -1, last = -1;
    for (int it = 0; it < 30; ++it) {
        f.ps.zero_grad();
        ad::Var out = f.unet.forward(low, ad::constant(low.t), ad::constant(Tensor::full({3, 16, 16}, 1.0)),
                                     ad::constant(Tensor::zeros({6, 16, 16})));
        ad::Var loss = ad::mean_all(ad::abs_(ad::sub(out, tgt)));
        if (it == 0)
            first = loss->val.v[0];
        last = loss->val.v[0];
        ad::backward(loss);
        opt.step(params);
    }
    CHECK(last < first * 0.8); // the residual path learns
}

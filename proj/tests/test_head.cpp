// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "merid/reflection_head.hpp"

using namespace merid;

namespace {

struct HeadFixture {
    nn::ParamStore ps;
    ReflectionHead head;
    explicit HeadFixture(std::uint64_t seed = 1) {
        Rng rng(seed);
        head = ReflectionHead(HeadConfig{}, ps, rng);
    }
};

RgbImage random_image(Rng& rng, int h, int w, double lo = 0.1, double hi = 0.9) {
    RgbImage img(h, w);
    for (double& v : img.t.v) v = rng.uniform(lo, hi);
    return img;
}

} // namespace

TEST_CASE("zero-initialized head is the exact identity", "[head]") {
    HeadFixture f;
    Rng rng(2);
    RgbImage r0 = random_image(rng, 9, 11);
    RgbImage out = f.head.apply(r0);
    CHECK(max_abs_diff(out.t, r0.t) == 0.0);
}

TEST_CASE("head parameter budget stays lightweight", "[head]") {
    HeadFixture f;
    CHECK(f.ps.count_scalars() < 1000);
}

TEST_CASE("head is pointwise: permutations commute and equal pixels agree", "[head]") {
    HeadFixture f(3);
    // non-trivial psi
    Rng rng(4);
    for (const auto& name : f.ps.names())
        for (double& v : f.ps.get(name)->val.v) v = rng.normal() * 0.2;

    RgbImage img = random_image(rng, 6, 8);
    // plant identical pixels
    for (int c = 0; c < 3; ++c) {
        img.at(c, 2, 3) = img.at(c, 5, 7);
        img.at(c, 0, 0) = img.at(c, 5, 7);
    }
    RgbImage out = f.head.apply(img);
    for (int c = 0; c < 3; ++c) {
        CHECK(out.at(c, 2, 3) == out.at(c, 5, 7));
        CHECK(out.at(c, 0, 0) == out.at(c, 5, 7));
    }

    // permutation commutes exactly: apply(permute(x)) == permute(apply(x))
    std::vector<std::pair<int, int>> perm;
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 8; ++x) perm.emplace_back(y, x);
    Rng shuffle_rng(5);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[shuffle_rng.below(i)]);
    RgbImage permuted(6, 8);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 8; ++x) {
            auto [sy, sx] = perm[static_cast<std::size_t>(y) * 8 + x];
            for (int c = 0; c < 3; ++c) permuted.at(c, y, x) = img.at(c, sy, sx);
        }
    RgbImage a = f.head.apply(permuted);
    RgbImage b(6, 8);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 8; ++x) {
            auto [sy, sx] = perm[static_cast<std::size_t>(y) * 8 + x];
            for (int c = 0; c < 3; ++c) b.at(c, y, x) = out.at(c, sy, sx);
        }
    CHECK(max_abs_diff(a.t, b.t) == 0.0);
}

TEST_CASE("adaptation on an exact optimum leaves parameters in place", "[head]") {
    HeadFixture f(7);
    Rng rng(8);
    RgbImage r0 = random_image(rng, 12, 12);
    std::vector<std::pair<RgbImage, RgbImage>> pairs{{r0, r0}}; // already perfect
    std::vector<Tensor> before;
    for (const auto& n : f.ps.names()) before.push_back(f.ps.get(n)->val);
    AdaptConfig cfg;
    cfg.iters = 50;
    adapt_head(f.head, f.ps, pairs, cfg);
    std::size_t i = 0;
    for (const auto& n : f.ps.names()) CHECK(max_abs_diff(f.ps.get(n)->val, before[i++]) < 1e-12);
}

TEST_CASE("adaptation recovers a known channel scale", "[head]") {
    HeadFixture f(9);
    Rng rng(10);
    // closed-form target: each channel scaled by 0.9
    std::vector<std::pair<RgbImage, RgbImage>> pairs;
    for (int k = 0; k < 4; ++k) {
        RgbImage r0 = random_image(rng, 16, 16, 0.1, 0.95);
        RgbImage target = r0;
        for (double& v : target.t.v) v *= 0.9;
        pairs.emplace_back(r0, target);
    }
    AdaptConfig cfg; // defaults: 800 iterations
    CHECK(cfg.iters == 800);
    CHECK(cfg.k_views == 10);
    adapt_head(f.head, f.ps, pairs, cfg);

    Rng probe(11);
    RgbImage test = random_image(probe, 16, 16, 0.1, 0.95);
    RgbImage expect = test;
    for (double& v : expect.t.v) v *= 0.9;
    RgbImage got = f.head.apply(test);
    CHECK(max_abs_diff(got.t, expect.t) < 0.02);
}

TEST_CASE("adaptation rejects empty input and bad configs", "[head]") {
    HeadFixture f(12);
    AdaptConfig cfg;
    CHECK_THROWS(adapt_head(f.head, f.ps, {}, cfg));
    cfg.iters = 0;
    Rng rng(13);
    RgbImage r = random_image(rng, 8, 8);
    CHECK_THROWS(adapt_head(f.head, f.ps, {{r, r}}, cfg));
}

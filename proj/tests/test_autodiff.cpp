// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "merid/autodiff.hpp"
#include "merid/nn.hpp"
#include "merid/rng.hpp"

#include "gradcheck.hpp"

using namespace merid;
using ad::Var;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& x : t.v) x = rng.uniform(lo, hi);
    return t;
}

} // namespace

TEST_CASE("elementwise ops match finite differences", "[autodiff]") {
    Rng rng(7);
    Var a = ad::param(random_tensor(rng, {2, 4, 4}, 0.2, 0.9));
    Var b = ad::param(random_tensor(rng, {2, 4, 4}, 0.2, 0.9));
    auto loss = [&] {
        Var x = ad::mul(ad::add(a, b), ad::sub(a, ad::mul_scalar(b, 0.5)));
        x = ad::add_scalar(x, 0.3);
        x = ad::gelu(x);
        x = ad::sigmoid(x);
        x = ad::mul(x, ad::exp_(ad::mul_scalar(a, 0.1)));
        x = ad::add(x, ad::log_(ad::add_scalar(ad::abs_(b), 1.0)));
        x = ad::add(x, ad::sqrt_(ad::add_scalar(a, 2.0)));
        return ad::mean_all(x);
    };
    auto res = testutil::check_gradients(loss, {{"a", a}, {"b", b}});
    CAPTURE(res.worst_param, res.worst_analytic, res.worst_numeric);
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("clamp straight-through passes gradient in the interior", "[autodiff]") {
    Rng rng(9);
    Var a = ad::param(random_tensor(rng, {1, 3, 3}, 0.2, 0.8));
    auto loss = [&] { return ad::mean_all(ad::clamp01_st(a)); };
    auto res = testutil::check_gradients(loss, {{"a", a}});
    CHECK(res.max_rel_error < 1e-9);

    // saturated values still receive gradient 1 inside the soft margin
    Var o = ad::param(Tensor({1, 1, 1}, std::vector<double>{1.02}));
    Var l = ad::mean_all(ad::clamp01_st(o, 0.05));
    CHECK(l->val.v[0] == 1.0);
    ad::backward(l);
    CHECK(o->grad.v[0] == 1.0);
}

TEST_CASE("shape ops route gradients exactly", "[autodiff]") {
    Rng rng(11);
    Var a = ad::param(random_tensor(rng, {3, 4, 6}));
    Var b = ad::param(random_tensor(rng, {2, 4, 6}));
    auto loss = [&] {
        Var c = ad::concat_channels(a, b);           // (5,4,6)
        Var s = ad::slice_channels(c, 1, 3);         // (3,4,6)
        Var p = ad::pad_reflect(s, 1, 1, 2, 2);      // (3,6,10)
        Var q = ad::slice_spatial(p, 1, 2, 4, 6);    // (3,4,6)
        Var r = ad::reshape(q, {12, 6});
        Var t = ad::transpose2d(r);
        return ad::mean_all(ad::mul(t, t));
    };
    auto res = testutil::check_gradients(loss, {{"a", a}, {"b", b}});
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("window split and assemble are inverse and differentiable", "[autodiff]") {
    Rng rng(13);
    Var a = ad::param(random_tensor(rng, {2, 4, 6}));
    std::vector<Var> tiles;
    for (int ty = 0; ty < 2; ++ty)
        for (int tx = 0; tx < 3; ++tx) tiles.push_back(ad::slice_spatial(a, 2 * ty, 2 * tx, 2, 2));
    Var re = ad::assemble_spatial(tiles, 2, 3);
    CHECK(max_abs_diff(re->val, a->val) == 0.0);

    auto loss = [&] {
        std::vector<Var> ts;
        for (int ty = 0; ty < 2; ++ty)
            for (int tx = 0; tx < 3; ++tx)
                ts.push_back(ad::gelu(ad::slice_spatial(a, 2 * ty, 2 * tx, 2, 2)));
        return ad::mean_all(ad::assemble_spatial(ts, 2, 3));
    };
    auto res = testutil::check_gradients(loss, {{"a", a}});
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("pooling and upsampling gradients", "[autodiff]") {
    Rng rng(17);
    Var a = ad::param(random_tensor(rng, {3, 6, 8}));
    auto loss = [&] {
        Var d = ad::avg_pool2(a);
        Var u = ad::upsample2_nearest(d);
        return ad::mean_all(ad::mul(u, u));
    };
    auto res = testutil::check_gradients(loss, {{"a", a}});
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("conv2d matches finite differences", "[autodiff]") {
    Rng rng(19);
    Var x = ad::param(random_tensor(rng, {3, 5, 6}));
    Var w = ad::param(random_tensor(rng, {4, 3, 3, 3}, -0.5, 0.5));
    Var b = ad::param(random_tensor(rng, {4}, -0.1, 0.1));
    auto loss = [&] { return ad::mean_all(ad::gelu(ad::conv2d(x, w, b))); };
    auto res = testutil::check_gradients(loss, {{"x", x}, {"w", w}, {"b", b}});
    CAPTURE(res.worst_param);
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("depthwise conv matches finite differences", "[autodiff]") {
    Rng rng(23);
    Var x = ad::param(random_tensor(rng, {4, 5, 5}));
    Var w = ad::param(random_tensor(rng, {4, 3, 3}, -0.5, 0.5));
    auto loss = [&] { return ad::mean_all(ad::mul(ad::depthwise_conv2d(x, w), x)); };
    auto res = testutil::check_gradients(loss, {{"x", x}, {"w", w}});
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("matmul softmax dense pipeline gradients", "[autodiff]") {
    Rng rng(29);
    Var q = ad::param(random_tensor(rng, {5, 4}));
    Var k = ad::param(random_tensor(rng, {5, 4}));
    Var v = ad::param(random_tensor(rng, {5, 4}));
    auto loss = [&] {
        Var scores = ad::mul_scalar(ad::matmul(q, ad::transpose2d(k)), 0.5);
        Var attn = ad::softmax_rows(scores);
        Var out = ad::matmul(attn, v);
        return ad::mean_all(ad::mul(out, out));
    };
    auto res = testutil::check_gradients(loss, {{"q", q}, {"k", k}, {"v", v}});
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("softmax rows sum to one", "[autodiff]") {
    Rng rng(31);
    Var a = ad::constant(random_tensor(rng, {7, 9}, -5.0, 5.0));
    Var s = ad::softmax_rows(a);
    for (int i = 0; i < 7; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 9; ++j) sum += s->val.v[static_cast<std::size_t>(i) * 9 + j];
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("dense and vector ops gradients", "[autodiff]") {
    Rng rng(37);
    Var x = ad::param(random_tensor(rng, {6}));
    Var y = ad::param(random_tensor(rng, {3}));
    Var w = ad::param(random_tensor(rng, {4, 9}, -0.5, 0.5));
    Var b = ad::param(random_tensor(rng, {4}, -0.1, 0.1));
    auto loss = [&] {
        Var in = ad::concat_vec(x, y);
        Var h = ad::gelu(ad::dense(in, w, b));
        return ad::mean_all(ad::mul(h, h));
    };
    auto res = testutil::check_gradients(loss, {{"x", x}, {"y", y}, {"w", w}, {"b", b}});
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("channel scaling and reductions gradients", "[autodiff]") {
    Rng rng(41);
    Var x = ad::param(random_tensor(rng, {4, 3, 5}));
    Var s = ad::param(random_tensor(rng, {4}, 0.5, 1.5));
    auto loss = [&] {
        Var y = ad::scale_channels(x, s);
        Var m = ad::spatial_mean(y); // (4)
        return ad::mean_all(ad::mul(m, m));
    };
    auto res = testutil::check_gradients(loss, {{"x", x}, {"s", s}});
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("layer norm gradients", "[autodiff]") {
    Rng rng(43);
    Var x = ad::param(random_tensor(rng, {6, 3, 4}));
    Var g = ad::param(random_tensor(rng, {6}, 0.5, 1.5));
    Var b = ad::param(random_tensor(rng, {6}, -0.2, 0.2));
    auto loss = [&] {
        Var y = ad::layer_norm_channels(x, g, b);
        return ad::mean_all(ad::mul(y, ad::gelu(y)));
    };
    auto res = testutil::check_gradients(loss, {{"x", x}, {"g", g}, {"b", b}}, 1e-5, 1e-5);
    CAPTURE(res.worst_param, res.worst_analytic, res.worst_numeric);
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("no-grad mode records nothing", "[autodiff]") {
    Var a = ad::param(Tensor({2}, std::vector<double>{1.0, 2.0}));
    ad::Var out;
    {
        ad::NoGrad ng;
        out = ad::mul(a, a);
    }
    CHECK_FALSE(out->requires_grad);
    CHECK(out->parents.empty());
}

TEST_CASE("adam reduces a quadratic", "[autodiff]") {
    Var p = ad::param(Tensor({3}, std::vector<double>{3.0, -2.0, 1.0}));
    nn::Adam opt(0.1);
    for (int i = 0; i < 200; ++i) {
        p->grad = Tensor();
        Var loss = ad::mean_all(ad::mul(p, p));
        ad::backward(loss);
        opt.step({p});
    }
    for (double x : p->val.v) CHECK(std::abs(x) < 1e-2);
}

TEST_CASE("forward evaluation is deterministic", "[autodiff]") {
    auto run = [] {
        Rng rng(55);
        Var x = ad::constant(random_tensor(rng, {3, 8, 8}));
        Var w = ad::constant(random_tensor(rng, {5, 3, 3, 3}));
        Var o = ad::conv2d(x, w, nullptr);
        return o->val;
    };
    Tensor a = run(), b = run();
    CHECK(max_abs_diff(a, b) == 0.0);
}

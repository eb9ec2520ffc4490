// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "merid/losses.hpp"
#include "merid/metrics.hpp"
#include "merid/rng.hpp"

using namespace merid;

namespace {

RgbImage random_image(Rng& rng, int h, int w) {
    RgbImage img(h, w);
    for (double& v : img.t.v) v = rng.uniform();
    return img;
}

// Independent SSIM reference: direct sliding-window evaluation with explicit
// weights, no shared filtering code with the implementation under test.
double ssim_reference(const RgbImage& a, const RgbImage& b) {
    const int win = 11, r = 5;
    const double sigma = 1.5, C1 = 1e-4, C2 = 9e-4;
    int H = a.height(), W = a.width();
    std::vector<double> wgt(win * win);
    double s = 0;
    for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x) {
            double dy = y - r, dx = x - r;
            wgt[static_cast<std::size_t>(y) * win + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            s += wgt[static_cast<std::size_t>(y) * win + x];
        }
    for (double& v : wgt) v /= s;
    double total = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double ma = 0, mb = 0, eaa = 0, ebb = 0, eab = 0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        int yy = y + dy, xx = x + dx;
                        double va = 0, vb = 0;
                        if (yy >= 0 && yy < H && xx >= 0 && xx < W) {
                            va = a.at(c, yy, xx);
                            vb = b.at(c, yy, xx);
                        }
                        double g = wgt[static_cast<std::size_t>(dy + r) * win + (dx + r)];
                        ma += g * va;
                        mb += g * vb;
                        eaa += g * va * va;
                        ebb += g * vb * vb;
                        eab += g * va * vb;
                    }
                double vva = eaa - ma * ma, vvb = ebb - mb * mb, cov = eab - ma * mb;
                total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (vva + vvb + C2));
            }
    return total / (3.0 * H * W);
}

} // namespace

TEST_CASE("psnr arithmetic", "[metrics]") {
    Rng rng(1);
    RgbImage a = random_image(rng, 12, 12);
    CHECK(std::isinf(psnr(a, a)));

    RgbImage b = a;
    for (double& v : b.t.v) v += 0.1; // uniform offset -> MSE 0.01 -> 20 dB
    CHECK(psnr(a, b) == Catch::Approx(20.0).margin(1e-9));

    RgbImage c = a;
    for (double& v : c.t.v) v += 0.5;
    CHECK(psnr(a, c) == Catch::Approx(10.0 * std::log10(4.0)).margin(1e-9));

    CHECK(psnr(a, b) == psnr(b, a));
}

TEST_CASE("ssim identity and the independent reference", "[metrics]") {
    Rng rng(2);
    RgbImage a = random_image(rng, 16, 14);
    CHECK(ssim(a, a) == Catch::Approx(1.0).margin(1e-12));
    CHECK(dssim(a, a) == Catch::Approx(0.0).margin(1e-12));

    // binary image vs its inverse, checked against the oracle
    RgbImage bin(16, 14);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 14; ++x)
            for (int c = 0; c < 3; ++c) bin.at(c, y, x) = ((x / 3 + y / 2) % 2 == 0) ? 1.0 : 0.0;
    RgbImage inv = bin;
    for (double& v : inv.t.v) v = 1.0 - v;
    CHECK(ssim(bin, inv) == Catch::Approx(ssim_reference(bin, inv)).margin(1e-6));

    RgbImage b = random_image(rng, 16, 14);
    CHECK(ssim(a, b) == Catch::Approx(ssim_reference(a, b)).margin(1e-6));
    CHECK(ssim(a, b) == ssim(b, a));

    RgbImage tiny(8, 8);
    CHECK_THROWS(ssim(tiny, tiny));
}

TEST_CASE("differentiable ssim agrees with the metric", "[metrics]") {
    Rng rng(3);
    RgbImage a = random_image(rng, 16, 12);
    RgbImage b = random_image(rng, 16, 12);
    ad::Var va = ad::constant(a.t), vb = ad::constant(b.t);
    CHECK(ssim_ad(va, vb)->val.v[0] == Catch::Approx(ssim(a, b)).margin(1e-12));
}

TEST_CASE("photometric loss trivials", "[metrics]") {
    Rng rng(4);
    RgbImage a = random_image(rng, 16, 16);
    CHECK(photometric_loss(a, a, 0.2) == Catch::Approx(0.0).margin(1e-12));

    RgbImage b = a;
    for (double& v : b.t.v) v += 0.1;
    CHECK(photometric_loss(a, b, 0.0) == Catch::Approx(0.1).margin(1e-9)); // pure L1
    CHECK(photometric_loss(a, b, 0.2) > 0.0);
    CHECK_THROWS(photometric_loss(a, b, 1.5));
}

TEST_CASE("brightness curve is the per-column Y mean", "[metrics]") {
    RgbImage c = RgbImage::constant(9, 13, 0.4, 0.4, 0.4);
    auto curve = brightness_curve(c);
    REQUIRE(curve.size() == 13);
    for (double v : curve) CHECK(v == Catch::Approx(0.4).margin(1e-12));

    RgbImage step(8, 10);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 10; ++x)
            for (int ch = 0; ch < 3; ++ch) step.at(ch, y, x) = x < 5 ? 0.0 : 1.0;
    auto sc = brightness_curve(step);
    for (int x = 0; x < 5; ++x) CHECK(sc[static_cast<std::size_t>(x)] == Catch::Approx(0.0).margin(1e-12));
    for (int x = 5; x < 10; ++x) CHECK(sc[static_cast<std::size_t>(x)] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("metric report aggregates and serializes", "[metrics]") {
    ViewMetrics v1{"a", 20.0, 0.9, false, 0.1, true};
    ViewMetrics v2{"b", 30.0, 0.8, false, 0.2, true};
    MetricReport r = MetricReport::aggregate({v1, v2});
    CHECK(r.psnr == Catch::Approx(25.0));
    CHECK(r.ssim == Catch::Approx(0.85));
    CHECK(r.lpips == Catch::Approx(0.15));

    nlohmann::json j = metric_report_to_json(r);
    CHECK(j["psnr"].get<double>() == Catch::Approx(25.0));
    CHECK(j["per_view"].size() == 2);

    ViewMetrics same{"c", 0.0, 1.0, true, -1.0, false};
    MetricReport ri = MetricReport::aggregate({same});
    nlohmann::json ji = metric_report_to_json(ri);
    CHECK(ji["psnr"].get<std::string>() == "identical");
    CHECK(ji["lpips"].is_null());
}

// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "merid/common.hpp"
#include "merid/image.hpp"

namespace merid {

// BT.601 full-range luma weights, shared by the Retinex stage and metrics.
inline double luma601(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

// Peak signal-to-noise ratio for unit dynamic range. Identical images return
// +infinity; reports render that as the "identical" sentinel.
inline double psnr(const RgbImage& a, const RgbImage& b) {
    require(a.t.same_shape(b.t), "psnr: shape mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.t.numel(); ++i) {
        double d = a.t.v[i] - b.t.v[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.t.numel());
    if (mse == 0.0)
        return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace ssim_detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size) * size);
    int r = size / 2;
    double s = 0.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double dy = y - r, dx = x - r;
            double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            w[static_cast<std::size_t>(y) * size + x] = g;
            s += g;
        }
    for (double& x : w) x /= s;
    return w;
}

// same-size filtering with zero padding, matching the conv the training loss uses
inline Tensor filter_plane(const Tensor& p, const std::vector<double>& win, int size) {
    int H = p.dim(0), W = p.dim(1), r = size / 2;
    Tensor out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int dy = -r; dy <= r; ++dy) {
                int yy = y + dy;
                if (yy < 0 || yy >= H)
                    continue;
                for (int dx = -r; dx <= r; ++dx) {
                    int xx = x + dx;
                    if (xx < 0 || xx >= W)
                        continue;
                    acc += win[static_cast<std::size_t>(dy + r) * size + (dx + r)] *
                           p.v[static_cast<std::size_t>(yy) * W + xx];
                }
            }
            out.v[static_cast<std::size_t>(y) * W + x] = acc;
        }
    return out;
}

} // namespace ssim_detail

// Structural similarity with an 11x11 Gaussian window (sigma 1.5) and the
// standard stabilizers C1=(0.01)^2, C2=(0.03)^2 for unit dynamic range,
// averaged over channels and pixels.
inline double ssim(const RgbImage& a, const RgbImage& b, int window = 11, double sigma = 1.5) {
    require(a.t.same_shape(b.t), "ssim: shape mismatch");
    int H = a.height(), W = a.width();
    if (H < window || W < window)
        fail("ssim: image %dx%d smaller than %dx%d window", W, H, window, window);
    auto win = ssim_detail::gaussian_window(window, sigma);
    const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    double total = 0.0;
    std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < 3; ++c) {
        Tensor pa({H, W}), pb({H, W}), paa({H, W}), pbb({H, W}), pab({H, W});
        for (std::size_t i = 0; i < hw; ++i) {
            double xa = a.t.v[c * hw + i], xb = b.t.v[c * hw + i];
            pa.v[i] = xa;
            pb.v[i] = xb;
            paa.v[i] = xa * xa;
            pbb.v[i] = xb * xb;
            pab.v[i] = xa * xb;
        }
        Tensor mu_a = ssim_detail::filter_plane(pa, win, window);
        Tensor mu_b = ssim_detail::filter_plane(pb, win, window);
        Tensor e_aa = ssim_detail::filter_plane(paa, win, window);
        Tensor e_bb = ssim_detail::filter_plane(pbb, win, window);
        Tensor e_ab = ssim_detail::filter_plane(pab, win, window);
        for (std::size_t i = 0; i < hw; ++i) {
            double ma = mu_a.v[i], mb = mu_b.v[i];
            double va = e_aa.v[i] - ma * ma;
            double vb = e_bb.v[i] - mb * mb;
            double cov = e_ab.v[i] - ma * mb;
            total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    return total / (3.0 * static_cast<double>(hw));
}

inline double dssim(const RgbImage& a, const RgbImage& b) { return 1.0 - ssim(a, b); }

// Per-column mean of the Y channel; length equals the image width.
inline std::vector<double> brightness_curve(const RgbImage& img) {
    int H = img.height(), W = img.width();
    std::vector<double> curve(static_cast<std::size_t>(W), 0.0);
    for (int x = 0; x < W; ++x) {
        double s = 0.0;
        for (int y = 0; y < H; ++y) s += luma601(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
        curve[static_cast<std::size_t>(x)] = s / H;
    }
    return curve;
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct ViewMetrics {
    std::string view_id;
    double psnr = 0.0;
    double ssim = 0.0;
    bool identical = false;     // MSE was exactly zero
    double lpips = -1.0;        // < 0 means unavailable
    bool lpips_available = false;
};

struct MetricReport {
    double psnr = 0.0; // arithmetic mean over views; +inf handled by `identical`
    double ssim = 0.0;
    bool any_identical = false;
    double lpips = -1.0;
    bool lpips_available = false;
    std::string lpips_note;
    std::vector<ViewMetrics> per_view;
    std::vector<double> brightness;

    static MetricReport aggregate(std::vector<ViewMetrics> views) {
        MetricReport r;
        r.per_view = std::move(views);
        require(!r.per_view.empty(), "metric report needs at least one view");
        double ps = 0.0, ss = 0.0, lp = 0.0;
        int lp_n = 0;
        for (const auto& v : r.per_view) {
            if (v.identical)
                r.any_identical = true;
            else
                ps += v.psnr;
            ss += v.ssim;
            if (v.lpips_available) {
                lp += v.lpips;
                ++lp_n;
            }
        }
        int finite = static_cast<int>(r.per_view.size());
        for (const auto& v : r.per_view)
            if (v.identical)
                --finite;
        r.psnr = finite > 0 ? ps / finite : std::numeric_limits<double>::infinity();
        r.ssim = ss / static_cast<double>(r.per_view.size());
        if (lp_n > 0) {
            r.lpips = lp / lp_n;
            r.lpips_available = true;
        }
        return r;
    }
};

inline nlohmann::json metric_report_to_json(const MetricReport& r) {
    nlohmann::json j;
    j["psnr"] = r.any_identical && !std::isfinite(r.psnr) ? nlohmann::json("identical") : nlohmann::json(r.psnr);
    j["ssim"] = r.ssim;
    j["lpips"] = r.lpips_available ? nlohmann::json(r.lpips) : nlohmann::json(nullptr);
    if (!r.lpips_note.empty())
        j["lpips_note"] = r.lpips_note;
    j["per_view"] = nlohmann::json::array();
    for (const auto& v : r.per_view) {
        nlohmann::json jv;
        jv["id"] = v.view_id;
        jv["psnr"] = v.identical ? nlohmann::json("identical") : nlohmann::json(v.psnr);
        jv["ssim"] = v.ssim;
        jv["lpips"] = v.lpips_available ? nlohmann::json(v.lpips) : nlohmann::json(nullptr);
        j["per_view"].push_back(jv);
    }
    if (!r.brightness.empty())
        j["brightness_curve"] = r.brightness;
    return j;
}

} // namespace merid

// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "merid/autodiff.hpp"
#include "merid/camera.hpp"
#include "merid/image.hpp"
#include "merid/losses.hpp"
#include "merid/rng.hpp"

namespace merid {

// Explicit anisotropic 3D gaussian. Scales live in log space and opacity as a
// logit so the constrained quantities stay positive / in (0,1) under plain
// gradient steps; the quaternion is renormalized after every optimizer step.
struct Gaussian3D {
    Vec3 mean{0, 0, 0};
    Vec3 log_scale{0, 0, 0};
    std::array<double, 4> quat{1, 0, 0, 0}; // (w,x,y,z)
    double opacity_logit = 0.0;
    Vec3 color{0.5, 0.5, 0.5};

    double opacity() const { return 1.0 / (1.0 + std::exp(-opacity_logit)); }

    bool finite() const {
        for (double v : mean)
            if (!std::isfinite(v)) return false;
        for (double v : log_scale)
            if (!std::isfinite(v)) return false;
        for (double v : quat)
            if (!std::isfinite(v)) return false;
        for (double v : color)
            if (!std::isfinite(v)) return false;
        return std::isfinite(opacity_logit);
    }
};

struct GaussianScene {
    std::vector<Gaussian3D> gaussians;
    Vec3 background{0, 0, 0};
};

struct RenderOutput {
    RgbImage image;
    Tensor alpha; // (H,W) accumulated opacity in [0,1]
};

struct RenderOptions {
    double near = 0.01;      // cull gaussians at or before this depth
    double blur = 0.3;       // px^2 anti-alias floor added to cov2d
    double alpha_min = 1.0 / 255.0; // contributions below this are skipped
    double sigma_cut = 3.0;  // Mahalanobis footprint cut

    // Exact evaluation for gradient verification: no footprint or alpha
    // cutoffs, so the rendered function is smooth in every parameter.
    static RenderOptions exact() {
        RenderOptions o;
        o.alpha_min = 0.0;
        o.sigma_cut = 1e9;
        return o;
    }
};

// Per-gaussian gradients produced by render_backward.
struct SceneGrads {
    std::vector<Vec3> mean;
    std::vector<Vec3> log_scale;
    std::vector<std::array<double, 4>> quat;
    std::vector<double> opacity_logit;
    std::vector<Vec3> color;
    std::vector<double> mean2d_norm; // |dL/dmean2d|, densification signal

    explicit SceneGrads(std::size_t n)
        : mean(n, Vec3{0, 0, 0}), log_scale(n, Vec3{0, 0, 0}), quat(n, {0, 0, 0, 0}),
          opacity_logit(n, 0.0), color(n, Vec3{0, 0, 0}), mean2d_norm(n, 0.0) {}
};

namespace splat_detail {

using M33 = std::array<std::array<double, 3>, 3>;
using M22 = std::array<std::array<double, 2>, 2>;

struct Projected {
    bool culled = true;
    int index = -1;
    double z = 0;
    double mx = 0, my = 0;      // pixel coordinates of the projected mean
    M22 cov{{{0, 0}, {0, 0}}};  // 2D covariance incl. blur floor
    M22 inv{{{0, 0}, {0, 0}}};
    double opacity = 0;
    // cached intermediates for the backward pass
    Vec3 pcam{0, 0, 0};
    M33 rot{};   // quaternion rotation matrix (of the normalized quat)
    Vec3 scale{0, 0, 0};
    M33 sigma{}; // 3D covariance
    double tmat[2][3] = {{0, 0, 0}, {0, 0, 0}}; // T = J * W
    double jac[2][3] = {{0, 0, 0}, {0, 0, 0}};  // projection Jacobian
};

inline M33 to_m33(const Mat3& m) {
    return {{{m[0], m[1], m[2]}, {m[3], m[4], m[5]}, {m[6], m[7], m[8]}}};
}

inline Projected project_one(const Gaussian3D& g, const Camera& cam, const RenderOptions& opts) {
    Projected p;
    p.pcam = cam.world_to_cam(g.mean);
    double x = p.pcam[0], y = p.pcam[1], z = p.pcam[2];
    if (z <= opts.near)
        return p; // culled
    p.culled = false;
    p.z = z;
    p.mx = cam.fx * x / z + cam.cx;
    p.my = cam.fy * y / z + cam.cy;

    double qn = std::sqrt(g.quat[0] * g.quat[0] + g.quat[1] * g.quat[1] + g.quat[2] * g.quat[2] +
                          g.quat[3] * g.quat[3]);
    p.rot = to_m33(quat_to_rotmat(g.quat[0] / qn, g.quat[1] / qn, g.quat[2] / qn, g.quat[3] / qn));
    for (int i = 0; i < 3; ++i) p.scale[i] = std::exp(g.log_scale[i]);

    // Sigma = (R S)(R S)^T
    M33 P{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) P[i][j] = p.rot[i][j] * p.scale[j];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += P[i][k] * P[j][k];
            p.sigma[i][j] = s;
        }

    p.jac[0][0] = cam.fx / z;
    p.jac[0][2] = -cam.fx * x / (z * z);
    p.jac[1][1] = cam.fy / z;
    p.jac[1][2] = -cam.fy * y / (z * z);

    const Mat3& W = cam.rotation;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += p.jac[i][k] * W[static_cast<std::size_t>(k) * 3 + j];
            p.tmat[i][j] = s;
        }
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k)
                for (int l = 0; l < 3; ++l) s += p.tmat[i][k] * p.sigma[k][l] * p.tmat[j][l];
            p.cov[i][j] = s;
        }
    p.cov[0][0] += opts.blur;
    p.cov[1][1] += opts.blur;

    double det = p.cov[0][0] * p.cov[1][1] - p.cov[0][1] * p.cov[1][0];
    require(det > 0.0, "projected covariance not positive definite");
    p.inv = {{{p.cov[1][1] / det, -p.cov[0][1] / det}, {-p.cov[1][0] / det, p.cov[0][0] / det}}};
    p.opacity = g.opacity();
    return p;
}

struct Contribution {
    int proj_idx;
    double alpha;
    double trans; // transmittance in front of this contribution
    double dx, dy;
};

} // namespace splat_detail

// Projects one gaussian; returns false when culled by the near plane.
// mean2d is in pixel units, cov2d row-major (xx,xy,yx,yy).
inline bool project(const Gaussian3D& g, const Camera& cam, double mean2d[2], double cov2d[4], double& depth,
                    const RenderOptions& opts = RenderOptions{}) {
    auto p = splat_detail::project_one(g, cam, opts);
    if (p.culled)
        return false;
    mean2d[0] = p.mx;
    mean2d[1] = p.my;
    cov2d[0] = p.cov[0][0];
    cov2d[1] = p.cov[0][1];
    cov2d[2] = p.cov[1][0];
    cov2d[3] = p.cov[1][1];
    depth = p.z;
    return true;
}

namespace splat_detail {

// Shared rasterization loop. When `grad_image` is non-null, gradients of
// sum(grad_image * image) w.r.t. every gaussian parameter are accumulated
// into `grads`.
inline RenderOutput rasterize(const GaussianScene& scene, const Camera& cam, const RenderOptions& opts,
                              const Tensor* grad_image, SceneGrads* grads) {
    require(!scene.gaussians.empty(), "render: empty scene");
    for (std::size_t i = 0; i < scene.gaussians.size(); ++i)
        if (!scene.gaussians[i].finite())
            fail("render: non-finite parameters in gaussian %zu", i);
    int W = cam.width, H = cam.height;
    require(W > 0 && H > 0, "render: camera has no resolution");

    std::vector<Projected> proj;
    proj.reserve(scene.gaussians.size());
    for (std::size_t i = 0; i < scene.gaussians.size(); ++i) {
        Projected p = project_one(scene.gaussians[i], cam, opts);
        p.index = static_cast<int>(i);
        if (!p.culled)
            proj.push_back(p);
    }
    // global front-to-back order; ties broken on intrinsic values so the
    // result is invariant to the input order of the list
    std::sort(proj.begin(), proj.end(), [&](const Projected& a, const Projected& b) {
        if (a.z != b.z)
            return a.z < b.z;
        const Gaussian3D& ga = scene.gaussians[static_cast<std::size_t>(a.index)];
        const Gaussian3D& gb = scene.gaussians[static_cast<std::size_t>(b.index)];
        if (ga.mean != gb.mean)
            return ga.mean < gb.mean;
        return ga.opacity_logit < gb.opacity_logit;
    });

    // conservative per-gaussian pixel bounds from the marginal deviations
    std::vector<std::array<int, 4>> bounds(proj.size());
    for (std::size_t i = 0; i < proj.size(); ++i) {
        const Projected& p = proj[i];
        double rx = opts.sigma_cut * std::sqrt(p.cov[0][0]);
        double ry = opts.sigma_cut * std::sqrt(p.cov[1][1]);
        rx = std::min(rx, 4.0 * std::max(W, H));
        ry = std::min(ry, 4.0 * std::max(W, H));
        int x0 = std::max(0, static_cast<int>(std::floor(p.mx - rx - 0.5)));
        int x1 = std::min(W - 1, static_cast<int>(std::ceil(p.mx + rx - 0.5)));
        int y0 = std::max(0, static_cast<int>(std::floor(p.my - ry - 0.5)));
        int y1 = std::min(H - 1, static_cast<int>(std::ceil(p.my + ry - 0.5)));
        bounds[i] = {x0, x1, y0, y1};
    }

    RenderOutput out;
    out.image = RgbImage(H, W);
    out.alpha = Tensor({H, W});
    double cut2 = opts.sigma_cut * opts.sigma_cut;

    std::vector<std::vector<std::size_t>> per_row(static_cast<std::size_t>(H));
    for (std::size_t i = 0; i < proj.size(); ++i)
        for (int y = bounds[i][2]; y <= bounds[i][3]; ++y) per_row[static_cast<std::size_t>(y)].push_back(i);

    std::vector<Contribution> stack;
    for (int y = 0; y < H; ++y) {
        double py = y + 0.5;
        for (int x = 0; x < W; ++x) {
            double px = x + 0.5;
            stack.clear();
            double trans = 1.0;
            for (std::size_t i : per_row[static_cast<std::size_t>(y)]) {
                if (x < bounds[i][0] || x > bounds[i][1])
                    continue;
                const Projected& p = proj[i];
                double dx = px - p.mx, dy = py - p.my;
                double m = p.inv[0][0] * dx * dx + 2.0 * p.inv[0][1] * dx * dy + p.inv[1][1] * dy * dy;
                if (m > cut2)
                    continue;
                double alpha = p.opacity * std::exp(-0.5 * m);
                if (alpha < opts.alpha_min)
                    continue;
                stack.push_back({static_cast<int>(i), alpha, trans, dx, dy});
                trans *= 1.0 - alpha;
                if (trans < 1e-8 && !grad_image)
                    break;
            }
            double pix[3];
            for (int c = 0; c < 3; ++c) pix[c] = trans * scene.background[static_cast<std::size_t>(c)];
            for (const auto& s : stack) {
                const Vec3& col = scene.gaussians[static_cast<std::size_t>(proj[static_cast<std::size_t>(s.proj_idx)].index)].color;
                for (int c = 0; c < 3; ++c) pix[c] += col[static_cast<std::size_t>(c)] * s.alpha * s.trans;
            }
            for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = pix[c];
            out.alpha.v[static_cast<std::size_t>(y) * W + x] = 1.0 - trans;

            if (!grad_image || stack.empty())
                continue;

            double gpix[3];
            for (int c = 0; c < 3; ++c) gpix[c] = grad_image->at3(c, y, x);
            // suffix S = everything rendered behind the current contribution
            double S[3];
            for (int c = 0; c < 3; ++c) S[c] = trans * scene.background[static_cast<std::size_t>(c)];
            for (std::size_t k = stack.size(); k-- > 0;) {
                const Contribution& s = stack[k];
                const Projected& p = proj[static_cast<std::size_t>(s.proj_idx)];
                int gi = p.index;
                const Vec3& col = scene.gaussians[static_cast<std::size_t>(gi)].color;
                double dalpha = 0.0;
                for (int c = 0; c < 3; ++c) {
                    grads->color[static_cast<std::size_t>(gi)][static_cast<std::size_t>(c)] +=
                        gpix[c] * s.alpha * s.trans;
                    dalpha += gpix[c] * (s.trans * col[static_cast<std::size_t>(c)] - S[c] / (1.0 - s.alpha));
                    S[c] += col[static_cast<std::size_t>(c)] * s.alpha * s.trans;
                }
                // alpha = opacity * exp(-m/2)
                double G = s.alpha / p.opacity;
                grads->opacity_logit[static_cast<std::size_t>(gi)] +=
                    dalpha * G * p.opacity * (1.0 - p.opacity);
                double dm = dalpha * (-0.5) * s.alpha;
                // m = d^T A d with d = pixel - mean2d
                double Adx = p.inv[0][0] * s.dx + p.inv[0][1] * s.dy;
                double Ady = p.inv[1][0] * s.dx + p.inv[1][1] * s.dy;
                double gmx = dm * (-2.0 * Adx);
                double gmy = dm * (-2.0 * Ady);
                // dL/dA = dm * d d^T, then dL/dC = -A (dL/dA) A
                double GA[2][2] = {{dm * s.dx * s.dx, dm * s.dx * s.dy},
                                   {dm * s.dy * s.dx, dm * s.dy * s.dy}};
                double AG[2][2];
                for (int i2 = 0; i2 < 2; ++i2)
                    for (int j2 = 0; j2 < 2; ++j2)
                        AG[i2][j2] = p.inv[i2][0] * GA[0][j2] + p.inv[i2][1] * GA[1][j2];
                double GC[2][2];
                for (int i2 = 0; i2 < 2; ++i2)
                    for (int j2 = 0; j2 < 2; ++j2)
                        GC[i2][j2] = -(AG[i2][0] * p.inv[0][j2] + AG[i2][1] * p.inv[1][j2]);

                // chain C = T Sigma T^T + blur I back to 3D parameters
                const Gaussian3D& g3 = scene.gaussians[static_cast<std::size_t>(gi)];
                // dL/dT = (GC + GC^T) T Sigma
                double sym[2][2] = {{GC[0][0] + GC[0][0], GC[0][1] + GC[1][0]},
                                    {GC[1][0] + GC[0][1], GC[1][1] + GC[1][1]}};
                double TS[2][3];
                for (int i2 = 0; i2 < 2; ++i2)
                    for (int j2 = 0; j2 < 3; ++j2) {
                        double acc = 0;
                        for (int k2 = 0; k2 < 3; ++k2) acc += p.tmat[i2][k2] * p.sigma[k2][j2];
                        TS[i2][j2] = acc;
                    }
                double GT[2][3];
                for (int i2 = 0; i2 < 2; ++i2)
                    for (int j2 = 0; j2 < 3; ++j2)
                        GT[i2][j2] = sym[i2][0] * TS[0][j2] + sym[i2][1] * TS[1][j2];
                // dL/dSigma = T^T GC T
                double GSig[3][3];
                for (int i2 = 0; i2 < 3; ++i2)
                    for (int j2 = 0; j2 < 3; ++j2) {
                        double acc = 0;
                        for (int a2 = 0; a2 < 2; ++a2)
                            for (int b2 = 0; b2 < 2; ++b2) acc += p.tmat[a2][i2] * GC[a2][b2] * p.tmat[b2][j2];
                        GSig[i2][j2] = acc;
                    }
                // Sigma = P P^T, P = R diag(s): dL/dP = (GSig + GSig^T) P
                double GP[3][3];
                for (int i2 = 0; i2 < 3; ++i2)
                    for (int j2 = 0; j2 < 3; ++j2) {
                        double acc = 0;
                        for (int k2 = 0; k2 < 3; ++k2)
                            acc += (GSig[i2][k2] + GSig[k2][i2]) * p.rot[k2][j2] * p.scale[j2];
                        GP[i2][j2] = acc;
                    }
                for (int j2 = 0; j2 < 3; ++j2) {
                    double ds = 0;
                    for (int i2 = 0; i2 < 3; ++i2) ds += GP[i2][j2] * p.rot[i2][j2];
                    grads->log_scale[static_cast<std::size_t>(gi)][static_cast<std::size_t>(j2)] +=
                        ds * p.scale[j2];
                }
                // dL/dR = GP diag(s)
                double GR[3][3];
                for (int i2 = 0; i2 < 3; ++i2)
                    for (int j2 = 0; j2 < 3; ++j2) GR[i2][j2] = GP[i2][j2] * p.scale[j2];
                // rotation -> normalized quaternion
                double qn = std::sqrt(g3.quat[0] * g3.quat[0] + g3.quat[1] * g3.quat[1] +
                                      g3.quat[2] * g3.quat[2] + g3.quat[3] * g3.quat[3]);
                double w = g3.quat[0] / qn, qx = g3.quat[1] / qn, qy = g3.quat[2] / qn, qz = g3.quat[3] / qn;
                double dqhat[4];
                dqhat[0] = 2.0 * (-qz * GR[0][1] + qy * GR[0][2] + qz * GR[1][0] - qx * GR[1][2] -
                                  qy * GR[2][0] + qx * GR[2][1]);
                dqhat[1] = 2.0 * (qy * GR[0][1] + qz * GR[0][2] + qy * GR[1][0] - 2.0 * qx * GR[1][1] -
                                  w * GR[1][2] + qz * GR[2][0] + w * GR[2][1] - 2.0 * qx * GR[2][2]);
                dqhat[2] = 2.0 * (-2.0 * qy * GR[0][0] + qx * GR[0][1] + w * GR[0][2] + qx * GR[1][0] +
                                  qz * GR[1][2] - w * GR[2][0] + qz * GR[2][1] - 2.0 * qy * GR[2][2]);
                dqhat[3] = 2.0 * (-2.0 * qz * GR[0][0] - w * GR[0][1] + qx * GR[0][2] + w * GR[1][0] -
                                  2.0 * qz * GR[1][1] + qy * GR[1][2] + qx * GR[2][0] + qy * GR[2][1]);
                double qhat[4] = {w, qx, qy, qz};
                double dot = dqhat[0] * qhat[0] + dqhat[1] * qhat[1] + dqhat[2] * qhat[2] + dqhat[3] * qhat[3];
                for (int i2 = 0; i2 < 4; ++i2)
                    grads->quat[static_cast<std::size_t>(gi)][static_cast<std::size_t>(i2)] +=
                        (dqhat[i2] - dot * qhat[i2]) / qn;

                // dL/dJ = GT W^T, plus the mean2d path
                double GJ[2][3];
                for (int i2 = 0; i2 < 2; ++i2)
                    for (int j2 = 0; j2 < 3; ++j2) {
                        double acc = 0;
                        for (int k2 = 0; k2 < 3; ++k2)
                            acc += GT[i2][k2] * cam.rotation[static_cast<std::size_t>(j2) * 3 + k2];
                        GJ[i2][j2] = acc;
                    }
                double xz = p.pcam[0], yz = p.pcam[1], zz = p.pcam[2];
                double z2 = zz * zz, z3 = z2 * zz;
                double dpc[3] = {0, 0, 0};
                // mean2d = (fx x / z + cx, fy y / z + cy)
                dpc[0] += gmx * cam.fx / zz;
                dpc[1] += gmy * cam.fy / zz;
                dpc[2] += -gmx * cam.fx * xz / z2 - gmy * cam.fy * yz / z2;
                // J entries depend on (x,y,z) too
                dpc[0] += GJ[0][2] * (-cam.fx / z2);
                dpc[1] += GJ[1][2] * (-cam.fy / z2);
                dpc[2] += GJ[0][0] * (-cam.fx / z2) + GJ[0][2] * (2.0 * cam.fx * xz / z3) +
                          GJ[1][1] * (-cam.fy / z2) + GJ[1][2] * (2.0 * cam.fy * yz / z3);
                Vec3 gworld = mat3_tmul_vec(cam.rotation, {dpc[0], dpc[1], dpc[2]});
                for (int i2 = 0; i2 < 3; ++i2)
                    grads->mean[static_cast<std::size_t>(gi)][static_cast<std::size_t>(i2)] += gworld[i2];
                grads->mean2d_norm[static_cast<std::size_t>(gi)] += std::sqrt(gmx * gmx + gmy * gmy);
            }
        }
    }
    return out;
}

} // namespace splat_detail

// Front-to-back alpha compositing of the depth-sorted scene.
inline RenderOutput render(const GaussianScene& scene, const Camera& cam,
                           const RenderOptions& opts = RenderOptions{}) {
    return splat_detail::rasterize(scene, cam, opts, nullptr, nullptr);
}

// Renders and accumulates dL/dparams given dL/dimage (3,H,W).
inline RenderOutput render_backward(const GaussianScene& scene, const Camera& cam, const Tensor& grad_image,
                                    SceneGrads& grads, const RenderOptions& opts = RenderOptions{}) {
    require(grad_image.rank() == 3 && grad_image.dim(0) == 3 && grad_image.dim(1) == cam.height &&
                grad_image.dim(2) == cam.width,
            "render_backward: grad image shape mismatch");
    return splat_detail::rasterize(scene, cam, opts, &grad_image, &grads);
}

// Eq-style photometric objective for the splatting stage; see losses.hpp for
// the shared implementation.
inline double gs_loss(const RgbImage& rendered, const RgbImage& target, double lambda) {
    return photometric_loss(rendered, target, lambda);
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

struct Bbox {
    Vec3 lo{-1, -1, -1};
    Vec3 hi{1, 1, 1};
};

inline GaussianScene init_scene_random(int n, const Bbox& box, std::uint64_t seed) {
    require(n >= 1, "init_scene: need at least one gaussian");
    Rng rng(seed);
    GaussianScene scene;
    scene.gaussians.resize(static_cast<std::size_t>(n));
    for (auto& g : scene.gaussians) {
        for (int i = 0; i < 3; ++i)
            g.mean[static_cast<std::size_t>(i)] =
                rng.uniform(box.lo[static_cast<std::size_t>(i)], box.hi[static_cast<std::size_t>(i)]);
        g.quat = {1, 0, 0, 0};
        g.opacity_logit = std::log(0.1 / 0.9);
        g.color = {0.5, 0.5, 0.5};
    }
    // nearest-neighbor distance heuristic for the initial extent
    for (auto& g : scene.gaussians) {
        double best = 1e30;
        for (const auto& o : scene.gaussians) {
            if (&o == &g)
                continue;
            double d2 = 0;
            for (int i = 0; i < 3; ++i) {
                double d = g.mean[static_cast<std::size_t>(i)] - o.mean[static_cast<std::size_t>(i)];
                d2 += d * d;
            }
            best = std::min(best, d2);
        }
        double d = scene.gaussians.size() > 1 ? std::sqrt(best) : 0.1;
        d = std::clamp(d, 1e-3, 1.0);
        for (int i = 0; i < 3; ++i) g.log_scale[static_cast<std::size_t>(i)] = std::log(d * 0.7);
    }
    return scene;
}

inline GaussianScene init_scene_from_points(const std::vector<Vec3>& points, const std::vector<Vec3>& colors,
                                            std::uint64_t seed) {
    require(!points.empty(), "init_scene: empty point list");
    (void)seed;
    GaussianScene scene;
    scene.gaussians.resize(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        Gaussian3D& g = scene.gaussians[i];
        g.mean = points[i];
        g.color = colors.empty() ? Vec3{0.5, 0.5, 0.5} : colors[std::min(i, colors.size() - 1)];
        g.quat = {1, 0, 0, 0};
        g.opacity_logit = std::log(0.1 / 0.9);
        double best = 1e30;
        for (std::size_t j = 0; j < points.size(); ++j) {
            if (j == i)
                continue;
            double d2 = 0;
            for (int k = 0; k < 3; ++k) {
                double d = points[i][static_cast<std::size_t>(k)] - points[j][static_cast<std::size_t>(k)];
                d2 += d * d;
            }
            best = std::min(best, d2);
        }
        double d = points.size() > 1 ? std::sqrt(best) : 0.1;
        d = std::clamp(d, 1e-3, 1.0);
        for (int k = 0; k < 3; ++k) g.log_scale[static_cast<std::size_t>(k)] = std::log(d * 0.7);
    }
    return scene;
}

// ---------------------------------------------------------------------------
// optimization
// ---------------------------------------------------------------------------

struct OptimizeConfig {
    int iters = 2000;
    double lambda = 0.2;
    bool densify = true;
    int densify_interval = 200;
    int densify_stop = 1600;       // no cloning after this iteration
    double densify_grad_threshold = 0.02; // avg |dL/dmean2d| per view, pixels
    double prune_opacity = 0.01;
    std::uint64_t seed = 0;
    double lr_mean = 2e-3;
    double lr_scale = 5e-3;
    double lr_quat = 1e-3;
    double lr_opacity = 5e-2;
    double lr_color = 1e-2;
    int log_every = 0; // 0 silences progress
};

namespace splat_detail {

struct AdamArray {
    std::vector<double> m, v;
    long t = 0;

    void resize(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
    void step(std::vector<double>& x, const std::vector<double>& g, double lr) {
        ++t;
        double c1 = 1.0 - std::pow(0.9, static_cast<double>(t));
        double c2 = 1.0 - std::pow(0.999, static_cast<double>(t));
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8);
        }
    }
};

} // namespace splat_detail

// Joint optimization of every gaussian parameter with the (1-l)L1 + l D-SSIM
// objective; one uniformly sampled view per iteration, optional clone/prune
// densification every densify_interval iterations.
inline GaussianScene optimize(GaussianScene scene, const std::vector<std::pair<RgbImage, Camera>>& views,
                              const OptimizeConfig& cfg, const RenderOptions& ropts = RenderOptions{},
                              std::vector<double>* loss_trace = nullptr) {
    require(views.size() >= 2, "optimize: need at least 2 views");
    Rng rng(cfg.seed);

    splat_detail::AdamArray opt_mean, opt_scale, opt_quat, opt_opacity, opt_color;
    std::vector<double> grad_accum;
    int accum_count = 0;
    auto reset_opt = [&] {
        std::size_t n = scene.gaussians.size();
        opt_mean.resize(3 * n);
        opt_scale.resize(3 * n);
        opt_quat.resize(4 * n);
        opt_opacity.resize(n);
        opt_color.resize(3 * n);
        grad_accum.assign(n, 0.0);
        accum_count = 0;
    };
    reset_opt();

    for (int iter = 0; iter < cfg.iters; ++iter) {
        const auto& [target, cam] = views[rng.below(views.size())];
        std::size_t n = scene.gaussians.size();

        // forward render, then dL/dimage through the autodiff loss
        RenderOutput ro = render(scene, cam, ropts);
        ad::Var img = ad::param(ro.image.t);
        ad::Var tgt = ad::constant(target.t);
        ad::Var loss = photometric_loss_ad(img, tgt, cfg.lambda);
        double loss_val = loss->val.v[0];
        if (!std::isfinite(loss_val))
            fail("optimize: non-finite loss at iteration %d (%zu gaussians)", iter, n);
        if (loss_trace)
            loss_trace->push_back(loss_val);
        ad::backward(loss);

        SceneGrads grads(n);
        render_backward(scene, cam, img->grad, grads, ropts);

        // flatten, step, write back
        std::vector<double> xm(3 * n), gm(3 * n), xs(3 * n), gs(3 * n), xq(4 * n), gq(4 * n), xo(n), go(n),
            xc(3 * n), gc(3 * n);
        for (std::size_t i = 0; i < n; ++i) {
            const Gaussian3D& g = scene.gaussians[i];
            for (int k = 0; k < 3; ++k) {
                xm[3 * i + k] = g.mean[static_cast<std::size_t>(k)];
                gm[3 * i + k] = grads.mean[i][static_cast<std::size_t>(k)];
                xs[3 * i + k] = g.log_scale[static_cast<std::size_t>(k)];
                gs[3 * i + k] = grads.log_scale[i][static_cast<std::size_t>(k)];
                xc[3 * i + k] = g.color[static_cast<std::size_t>(k)];
                gc[3 * i + k] = grads.color[i][static_cast<std::size_t>(k)];
            }
            for (int k = 0; k < 4; ++k) {
                xq[4 * i + k] = g.quat[static_cast<std::size_t>(k)];
                gq[4 * i + k] = grads.quat[i][static_cast<std::size_t>(k)];
            }
            xo[i] = g.opacity_logit;
            go[i] = grads.opacity_logit[i];
            grad_accum[i] += grads.mean2d_norm[i];
        }
        ++accum_count;
        opt_mean.step(xm, gm, cfg.lr_mean);
        opt_scale.step(xs, gs, cfg.lr_scale);
        opt_quat.step(xq, gq, cfg.lr_quat);
        opt_opacity.step(xo, go, cfg.lr_opacity);
        opt_color.step(xc, gc, cfg.lr_color);
        for (std::size_t i = 0; i < n; ++i) {
            Gaussian3D& g = scene.gaussians[i];
            for (int k = 0; k < 3; ++k) {
                g.mean[static_cast<std::size_t>(k)] = xm[3 * i + k];
                g.log_scale[static_cast<std::size_t>(k)] = std::clamp(xs[3 * i + k], -9.0, 4.0);
                g.color[static_cast<std::size_t>(k)] = std::clamp(xc[3 * i + k], 0.0, 1.0);
            }
            double qn = 0;
            for (int k = 0; k < 4; ++k) qn += xq[4 * i + k] * xq[4 * i + k];
            qn = std::sqrt(qn);
            require(qn > 0, "optimize: quaternion collapsed to zero");
            for (int k = 0; k < 4; ++k) g.quat[static_cast<std::size_t>(k)] = xq[4 * i + k] / qn;
            g.opacity_logit = xo[i];
        }

        if (cfg.log_every > 0 && (iter + 1) % cfg.log_every == 0)
            std::printf("  gs iter %d loss %.5f gaussians %zu\n", iter + 1, loss_val, n);

        if (cfg.densify && (iter + 1) % cfg.densify_interval == 0 && iter + 1 < cfg.iters) {
            std::vector<Gaussian3D> kept;
            kept.reserve(n);
            std::vector<double> kept_accum;
            for (std::size_t i = 0; i < n; ++i) {
                if (scene.gaussians[i].opacity() < cfg.prune_opacity)
                    continue;
                kept.push_back(scene.gaussians[i]);
                kept_accum.push_back(grad_accum[i]);
            }
            std::size_t base = kept.size();
            if (iter + 1 <= cfg.densify_stop) {
                for (std::size_t i = 0; i < base; ++i) {
                    double avg = kept_accum[i] / std::max(1, accum_count);
                    if (avg > cfg.densify_grad_threshold) {
                        Gaussian3D clone = kept[i];
                        for (int k = 0; k < 3; ++k)
                            clone.mean[static_cast<std::size_t>(k)] +=
                                0.3 * std::exp(clone.log_scale[static_cast<std::size_t>(k)]) *
                                rng.normal();
                        kept.push_back(clone);
                    }
                }
            }
            require(!kept.empty(), "optimize: densification pruned every gaussian");
            scene.gaussians = std::move(kept);
            reset_opt(); // parameter count changed; restart moments
        }
    }
    return scene;
}

// ---------------------------------------------------------------------------
// serialization (JSON blob of parameter arrays)
// ---------------------------------------------------------------------------

inline nlohmann::json scene_to_json(const GaussianScene& scene) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["background"] = {scene.background[0], scene.background[1], scene.background[2]};
    auto arr = [](auto get, std::size_t n) {
        nlohmann::json a = nlohmann::json::array();
        for (std::size_t i = 0; i < n; ++i) a.push_back(get(i));
        return a;
    };
    std::size_t n = scene.gaussians.size();
    const auto& g = scene.gaussians;
    j["mean"] = arr([&](std::size_t i) { return std::vector<double>{g[i].mean[0], g[i].mean[1], g[i].mean[2]}; }, n);
    j["log_scale"] =
        arr([&](std::size_t i) { return std::vector<double>{g[i].log_scale[0], g[i].log_scale[1], g[i].log_scale[2]}; }, n);
    j["quat"] = arr(
        [&](std::size_t i) { return std::vector<double>{g[i].quat[0], g[i].quat[1], g[i].quat[2], g[i].quat[3]}; }, n);
    j["opacity_logit"] = arr([&](std::size_t i) { return g[i].opacity_logit; }, n);
    j["color"] = arr([&](std::size_t i) { return std::vector<double>{g[i].color[0], g[i].color[1], g[i].color[2]}; }, n);
    return j;
}

inline GaussianScene scene_from_json(const nlohmann::json& j) {
    require(j.at("format_version").get<int>() == 1, "unsupported scene format version");
    GaussianScene scene;
    auto bg = j.at("background");
    scene.background = {bg.at(0).get<double>(), bg.at(1).get<double>(), bg.at(2).get<double>()};
    std::size_t n = j.at("mean").size();
    scene.gaussians.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Gaussian3D& g = scene.gaussians[i];
        for (int k = 0; k < 3; ++k) {
            g.mean[static_cast<std::size_t>(k)] = j.at("mean").at(i).at(k).get<double>();
            g.log_scale[static_cast<std::size_t>(k)] = j.at("log_scale").at(i).at(k).get<double>();
            g.color[static_cast<std::size_t>(k)] = j.at("color").at(i).at(k).get<double>();
        }
        for (int k = 0; k < 4; ++k) g.quat[static_cast<std::size_t>(k)] = j.at("quat").at(i).at(k).get<double>();
        g.opacity_logit = j.at("opacity_logit").at(i).get<double>();
    }
    return scene;
}

inline void save_scene(const std::string& path, const GaussianScene& scene) {
    std::ofstream f(path);
    if (!f)
        fail("cannot write %s", path.c_str());
    f << scene_to_json(scene).dump() << "\n";
}

inline GaussianScene load_scene(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        fail("cannot open %s", path.c_str());
    nlohmann::json j;
    f >> j;
    return scene_from_json(j);
}

} // namespace merid

// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "merid/camera.hpp"
#include "merid/gsplat.hpp"
#include "merid/image.hpp"
#include "merid/manifest.hpp"
#include "merid/rng.hpp"

namespace merid {

// ---------------------------------------------------------------------------
// synthetic degradation
// ---------------------------------------------------------------------------

// out = clamp(attenuation * spatial_illum * image^gamma + shot + read, 0, 1).
// spatial_illum empty means a uniform field of 1. Noise is seeded; the same
// spec yields bit-identical output.
struct DegradationSpec {
    double gamma = 2.2;          // exponent > 0
    double attenuation = 0.15;   // in (0,1]
    Tensor spatial_illum;        // (H,W) in (0,1], optional
    double noise_read = 0.0;     // gaussian std
    double noise_shot = 0.0;     // poisson scale (photons per unit); 0 = off
    std::uint64_t seed = 0;

    void validate(int h, int w) const {
        require(gamma > 0.0, "degradation: gamma must be > 0");
        require(attenuation > 0.0 && attenuation <= 1.0, "degradation: attenuation must be in (0,1]");
        require(noise_read >= 0.0 && noise_shot >= 0.0, "degradation: negative noise");
        if (!spatial_illum.v.empty()) {
            require(spatial_illum.rank() == 2 && spatial_illum.dim(0) == h && spatial_illum.dim(1) == w,
                    "degradation: illumination field shape mismatch");
            for (double v : spatial_illum.v)
                require(v > 0.0 && v <= 1.0, "degradation: illumination field must be in (0,1]");
        }
    }
};

// Smooth multiplicative illumination field: a coarse seeded grid interpolated
// bilinearly, mapped into [lo,hi].
inline Tensor make_smooth_illum(int h, int w, std::uint64_t seed, double lo = 0.6, double hi = 1.0, int cells = 3) {
    require(lo > 0.0 && lo <= hi && hi <= 1.0, "illumination field bounds must satisfy 0 < lo <= hi <= 1");
    Rng rng(seed);
    int gw = cells + 1, gh = cells + 1;
    std::vector<double> grid(static_cast<std::size_t>(gw) * gh);
    for (double& g : grid) g = rng.uniform(lo, hi);
    Tensor out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double fy = h > 1 ? static_cast<double>(y) / (h - 1) * cells : 0.0;
            double fx = w > 1 ? static_cast<double>(x) / (w - 1) * cells : 0.0;
            int iy = std::min(static_cast<int>(fy), cells - 1);
            int ix = std::min(static_cast<int>(fx), cells - 1);
            double ty = fy - iy, tx = fx - ix;
            double v00 = grid[static_cast<std::size_t>(iy) * gw + ix];
            double v01 = grid[static_cast<std::size_t>(iy) * gw + ix + 1];
            double v10 = grid[static_cast<std::size_t>(iy + 1) * gw + ix];
            double v11 = grid[static_cast<std::size_t>(iy + 1) * gw + ix + 1];
            out.v[static_cast<std::size_t>(y) * w + x] =
                (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
        }
    return out;
}

inline RgbImage apply_degradation(const RgbImage& image, const DegradationSpec& spec) {
    int h = image.height(), w = image.width();
    spec.validate(h, w);
    Rng rng(spec.seed);
    RgbImage out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double illum = spec.spatial_illum.v.empty()
                               ? 1.0
                               : spec.spatial_illum.v[static_cast<std::size_t>(y) * w + x];
            for (int c = 0; c < 3; ++c) {
                double base = spec.attenuation * illum * std::pow(image.at(c, y, x), spec.gamma);
                double v = base;
                if (spec.noise_shot > 0.0)
                    v += static_cast<double>(rng.poisson(base * spec.noise_shot)) / spec.noise_shot - base;
                if (spec.noise_read > 0.0)
                    v += rng.normal(0.0, spec.noise_read);
                out.at(c, y, x) = std::clamp(v, 0.0, 1.0);
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic desk-scale scenes (reference ray tracer, independent of gsplat)
// ---------------------------------------------------------------------------

struct SynthPrimitive {
    enum class Kind { Sphere, Box } kind = Kind::Sphere;
    Vec3 center{0, 0, 0};
    Vec3 extent{0.5, 0.5, 0.5}; // radius in x for spheres; half-extents for boxes
    Vec3 color{1, 0, 0};
};

struct SynthSceneSpec {
    std::vector<SynthPrimitive> primitives;
    Vec3 background{0.35, 0.35, 0.38};
    double ring_radius = 3.0;
    double ring_height = 1.2;
    Vec3 light_dir{0.35, -0.5, 0.85}; // world space, toward the light
    double ambient = 0.35;
};

namespace synth_detail {

inline Vec3 normalize(const Vec3& v) {
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    require(n > 1e-12, "cannot normalize zero vector");
    return {v[0] / n, v[1] / n, v[2] / n};
}

inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

inline bool hit_sphere(const Vec3& ro, const Vec3& rd, const SynthPrimitive& p, double& t, Vec3& n) {
    Vec3 oc{ro[0] - p.center[0], ro[1] - p.center[1], ro[2] - p.center[2]};
    double r = p.extent[0];
    double b = oc[0] * rd[0] + oc[1] * rd[1] + oc[2] * rd[2];
    double c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - r * r;
    double disc = b * b - c;
    if (disc < 0)
        return false;
    double tt = -b - std::sqrt(disc);
    if (tt <= 1e-6)
        return false;
    t = tt;
    for (int i = 0; i < 3; ++i) n[static_cast<std::size_t>(i)] = (ro[static_cast<std::size_t>(i)] + tt * rd[static_cast<std::size_t>(i)] - p.center[static_cast<std::size_t>(i)]) / r;
    return true;
}

inline bool hit_box(const Vec3& ro, const Vec3& rd, const SynthPrimitive& p, double& t, Vec3& n) {
    double tmin = -1e30, tmax = 1e30;
    int axis = 0;
    double sign = 1.0;
    for (int i = 0; i < 3; ++i) {
        double lo = p.center[static_cast<std::size_t>(i)] - p.extent[static_cast<std::size_t>(i)];
        double hi = p.center[static_cast<std::size_t>(i)] + p.extent[static_cast<std::size_t>(i)];
        double o = ro[static_cast<std::size_t>(i)], d = rd[static_cast<std::size_t>(i)];
        if (std::abs(d) < 1e-12) {
            if (o < lo || o > hi)
                return false;
            continue;
        }
        double t0 = (lo - o) / d, t1 = (hi - o) / d;
        double s = -1.0;
        if (t0 > t1) {
            std::swap(t0, t1);
            s = 1.0;
        }
        if (t0 > tmin) {
            tmin = t0;
            axis = i;
            sign = s;
        }
        tmax = std::min(tmax, t1);
        if (tmin > tmax)
            return false;
    }
    if (tmin <= 1e-6)
        return false;
    t = tmin;
    n = {0, 0, 0};
    n[static_cast<std::size_t>(axis)] = sign;
    return true;
}

} // namespace synth_detail

// Cameras on a 360-degree ring around the origin, COLMAP convention.
inline Camera ring_camera(double angle, double radius, double height, int width, int height_px, double focal) {
    if (radius <= 0.0)
        fail("degenerate camera placement (ring radius %.3f)", radius);
    Vec3 eye{radius * std::cos(angle), radius * std::sin(angle), height};
    Vec3 fwd = synth_detail::normalize({-eye[0], -eye[1], -eye[2]});
    Vec3 right = synth_detail::normalize(synth_detail::cross(fwd, Vec3{0, 0, 1}));
    Vec3 down = synth_detail::cross(fwd, right);
    Camera cam;
    cam.width = width;
    cam.height = height_px;
    cam.fx = cam.fy = focal;
    cam.cx = width / 2.0;
    cam.cy = height_px / 2.0;
    cam.rotation = {right[0], right[1], right[2], down[0], down[1], down[2], fwd[0], fwd[1], fwd[2]};
    Vec3 rt = mat3_mul_vec(cam.rotation, eye);
    cam.translation = {-rt[0], -rt[1], -rt[2]};
    cam.validate();
    return cam;
}

// Lambertian reference render; the oracle counterpart to the splatting path.
inline RgbImage ray_render(const SynthSceneSpec& spec, const Camera& cam) {
    require(!spec.primitives.empty(), "synthetic scene needs at least one primitive");
    Vec3 light = synth_detail::normalize(spec.light_dir);
    RgbImage img(cam.height, cam.width);
    Vec3 origin = cam.center();
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            Vec3 dir_cam{(x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0};
            Vec3 dir = synth_detail::normalize(mat3_tmul_vec(cam.rotation, dir_cam));
            double best_t = 1e30;
            Vec3 best_n{0, 0, 0};
            const SynthPrimitive* best = nullptr;
            for (const auto& p : spec.primitives) {
                double t;
                Vec3 n;
                bool hit = p.kind == SynthPrimitive::Kind::Sphere ? synth_detail::hit_sphere(origin, dir, p, t, n)
                                                                  : synth_detail::hit_box(origin, dir, p, t, n);
                if (hit && t < best_t) {
                    best_t = t;
                    best_n = n;
                    best = &p;
                }
            }
            if (best) {
                double ndl = std::max(0.0, best_n[0] * light[0] + best_n[1] * light[1] + best_n[2] * light[2]);
                double shade = spec.ambient + (1.0 - spec.ambient) * ndl;
                for (int c = 0; c < 3; ++c)
                    img.at(c, y, x) = std::clamp(best->color[static_cast<std::size_t>(c)] * shade, 0.0, 1.0);
            } else {
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = spec.background[static_cast<std::size_t>(c)];
            }
        }
    return img;
}

struct SynthViews {
    std::vector<std::pair<Camera, RgbImage>> views; // normal-light renders
    GaussianScene ground_truth;
};

// Renders n_views cameras on a ring; ground truth is a gaussian per surface
// sample plus one per primitive center, usable as a from_points init.
inline SynthViews synth_views(const SynthSceneSpec& spec, int n_views, int width, int height,
                              std::uint64_t seed) {
    if (n_views < 2)
        fail("synthetic scene needs at least 2 views, got %d", n_views);
    require(!spec.primitives.empty(), "synthetic scene needs at least one primitive");
    double focal = 1.1 * std::min(width, height);
    SynthViews out;
    for (int i = 0; i < n_views; ++i) {
        double angle = 2.0 * 3.14159265358979323846 * i / n_views;
        Camera cam = ring_camera(angle, spec.ring_radius, spec.ring_height, width, height, focal);
        out.views.emplace_back(cam, ray_render(spec, cam));
    }
    std::vector<Vec3> pts;
    std::vector<Vec3> cols;
    Rng prng(seed + 17);
    for (const auto& p : spec.primitives) {
        pts.push_back(p.center);
        cols.push_back(p.color);
        for (int k = 0; k < 8; ++k) {
            Vec3 d{prng.normal(), prng.normal(), prng.normal()};
            d = synth_detail::normalize(d);
            Vec3 q;
            for (int i = 0; i < 3; ++i)
                q[static_cast<std::size_t>(i)] = p.center[static_cast<std::size_t>(i)] +
                                                 d[static_cast<std::size_t>(i)] * p.extent[0] * 0.8;
            pts.push_back(q);
            cols.push_back(p.color);
        }
    }
    out.ground_truth = init_scene_from_points(pts, cols, seed);
    out.ground_truth.background = spec.background;
    return out;
}

// Canonical desk-scale test scenes: a handful of colored primitives. The
// variant index permutes colors and layout so "base" and "unseen" scenes
// differ the way two captures of different desks would.
inline SynthSceneSpec default_synth_scene(int variant) {
    SynthSceneSpec s;
    auto mk = [](SynthPrimitive::Kind k, Vec3 c, Vec3 e, Vec3 col) {
        SynthPrimitive p;
        p.kind = k;
        p.center = c;
        p.extent = e;
        p.color = col;
        return p;
    };
    if (variant % 2 == 0) {
        s.primitives.push_back(mk(SynthPrimitive::Kind::Sphere, {0.0, 0.0, 0.45}, {0.55, 0.55, 0.55}, {0.85, 0.25, 0.2}));
        s.primitives.push_back(mk(SynthPrimitive::Kind::Sphere, {0.9, 0.4, 0.25}, {0.3, 0.3, 0.3}, {0.2, 0.6, 0.85}));
        s.primitives.push_back(mk(SynthPrimitive::Kind::Box, {-0.7, 0.6, 0.2}, {0.35, 0.35, 0.2}, {0.3, 0.75, 0.3}));
        s.primitives.push_back(mk(SynthPrimitive::Kind::Box, {0.0, 0.0, -0.15}, {1.6, 1.6, 0.08}, {0.55, 0.5, 0.45}));
        s.background = {0.32, 0.33, 0.38};
    } else {
        s.primitives.push_back(mk(SynthPrimitive::Kind::Sphere, {0.1, -0.2, 0.5}, {0.5, 0.5, 0.5}, {0.85, 0.7, 0.2}));
        s.primitives.push_back(mk(SynthPrimitive::Kind::Box, {0.8, 0.5, 0.25}, {0.3, 0.3, 0.25}, {0.6, 0.25, 0.7}));
        s.primitives.push_back(mk(SynthPrimitive::Kind::Sphere, {-0.8, 0.4, 0.3}, {0.35, 0.35, 0.35}, {0.25, 0.7, 0.65}));
        s.primitives.push_back(mk(SynthPrimitive::Kind::Box, {0.0, 0.0, -0.15}, {1.6, 1.6, 0.08}, {0.45, 0.52, 0.5}));
        s.background = {0.36, 0.3, 0.33};
    }
    return s;
}

// Writes a full scene directory (low/, normal/, colmap/, manifest.json) and
// reloads it through load_manifest, so the on-disk layout is validated.
inline SceneManifest synth_scene(const SynthSceneSpec& spec, int n_views, int width, int height,
                                 std::uint64_t seed, const DegradationSpec& degradation,
                                 const std::string& out_dir, GaussianScene* ground_truth = nullptr) {
    SynthViews sv = synth_views(spec, n_views, width, height, seed);
    fs::create_directories(fs::path(out_dir) / "low");
    fs::create_directories(fs::path(out_dir) / "normal");
    fs::create_directories(fs::path(out_dir) / "colmap");
    std::vector<std::pair<std::string, Camera>> named;
    for (std::size_t i = 0; i < sv.views.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "view_%03zu.png", i);
        const auto& [cam, normal] = sv.views[i];
        DegradationSpec d = degradation;
        d.seed = degradation.seed + i;
        RgbImage low = apply_degradation(normal, d);
        save_png((fs::path(out_dir) / "normal" / name).string(), normal);
        save_png((fs::path(out_dir) / "low" / name).string(), low);
        named.emplace_back(name, cam);
    }
    write_colmap_text((fs::path(out_dir) / "colmap" / "cameras.txt").string(),
                      (fs::path(out_dir) / "colmap" / "images.txt").string(), named);
    SceneManifest m = load_manifest(out_dir);
    save_manifest_json((fs::path(out_dir) / "manifest.json").string(), m);
    if (ground_truth)
        *ground_truth = sv.ground_truth;
    return m;
}

} // namespace merid

// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "merid/checkpoint.hpp"
#include "merid/gsplat.hpp"
#include "merid/manifest.hpp"
#include "merid/metrics.hpp"
#include "merid/model.hpp"
#include "merid/synth.hpp"

namespace merid {

struct LoadedView {
    std::string id;
    RgbImage low, normal;
    Camera camera;
};

inline std::vector<LoadedView> load_views(const SceneManifest& manifest, const std::vector<std::string>& ids) {
    std::vector<LoadedView> out;
    for (const auto& id : ids) {
        const ViewEntry& v = manifest.view(id);
        out.push_back({id, load_image(v.low_path), load_image(v.normal_path), v.camera});
    }
    return out;
}

inline std::vector<std::string> all_ids(const SceneManifest& manifest) {
    std::vector<std::string> ids;
    for (const auto& v : manifest.views) ids.push_back(v.id);
    return ids;
}

// ---------------------------------------------------------------------------
// base training
// ---------------------------------------------------------------------------

struct TrainResult {
    std::vector<double> loss_trace;
    std::vector<std::pair<long, double>> val_psnr; // (step, value)
    double initial_val_psnr = 0.0;
    double final_val_psnr = 0.0;
};

namespace pipeline_detail {

inline RgbImage crop(const RgbImage& img, int y0, int x0, int size) {
    RgbImage out(size, size);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    return out;
}

inline double validation_psnr(const MeridModel& model, const std::vector<LoadedView>& val_views) {
    double total = 0.0;
    for (const auto& v : val_views) {
        RgbImage r0 = model.enhance(v.low, /*with_head=*/false);
        double p = psnr(r0, v.normal);
        total += std::isfinite(p) ? p : 99.0;
    }
    return total / static_cast<double>(val_views.size());
}

} // namespace pipeline_detail

// Trains the Retinex + IS-FGA stages on the preprocess_train split with the
// L1 + w(1-SSIM) objective. Continues from model.step, so resuming from a
// checkpoint picks up at the stored counter. Divergence aborts after writing
// the last good checkpoint.
inline TrainResult run_train_base(MeridModel& model, const SceneManifest& manifest, const SplitSpec& split,
                                  const std::string& checkpoint_path, bool verbose = false) {
    const TrainConfig& tc = model.config().train;
    require(!split.preprocess_train.empty(), "train: empty preprocess_train split");
    std::vector<LoadedView> train_views = load_views(manifest, split.preprocess_train);
    std::vector<LoadedView> val_views =
        load_views(manifest, split.test.empty() ? split.preprocess_train : split.test);

    Rng rng(model.config().seed + 101);
    nn::Adam opt(tc.lr);
    auto params = model.trainable_base_params();

    TrainResult result;
    result.initial_val_psnr = pipeline_detail::validation_psnr(model, val_views);
    result.val_psnr.emplace_back(model.step, result.initial_val_psnr);
    if (verbose)
        std::printf("step %ld val PSNR %.2f dB\n", model.step, result.initial_val_psnr);

    while (model.step < tc.iters) {
        const LoadedView& view = train_views[rng.below(train_views.size())];
        RgbImage low = view.low, normal = view.normal;
        if (tc.crop > 0 && (view.low.height() > tc.crop || view.low.width() > tc.crop)) {
            require(tc.crop >= 16, "train: crop must be at least 16");
            int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(view.low.height() - tc.crop + 1)));
            int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(view.low.width() - tc.crop + 1)));
            low = pipeline_detail::crop(view.low, y0, x0, tc.crop);
            normal = pipeline_detail::crop(view.normal, y0, x0, tc.crop);
        }
        model.zero_grad_base();
        ad::Var r0 = model.enhance_var(low);
        ad::Var loss = base_loss_ad(r0, ad::constant(normal.t), tc.dssim_weight);
        double loss_val = loss->val.v[0];
        if (!std::isfinite(loss_val)) {
            if (!checkpoint_path.empty())
                save_checkpoint(checkpoint_path, model);
            fail("train: loss diverged (non-finite) at step %ld; last good checkpoint kept", model.step);
        }
        result.loss_trace.push_back(loss_val);
        ad::backward(loss);
        opt.set_lr(nn::cosine_lr(tc.lr, model.step, tc.iters));
        opt.step(params);
        ++model.step;

        if (model.step % tc.val_every == 0 || model.step == tc.iters) {
            double vp = pipeline_detail::validation_psnr(model, val_views);
            result.val_psnr.emplace_back(model.step, vp);
            if (verbose)
                std::printf("step %ld loss %.4f val PSNR %.2f dB\n", model.step, loss_val, vp);
            if (!checkpoint_path.empty())
                save_checkpoint(checkpoint_path, model);
        }
    }
    result.final_val_psnr = result.val_psnr.back().second;
    if (!checkpoint_path.empty())
        save_checkpoint(checkpoint_path, model);
    return result;
}

// ---------------------------------------------------------------------------
// few-shot adaptation
// ---------------------------------------------------------------------------

// Samples k paired views from preprocess_train, freezes the enhancer (R0 is
// precomputed once per view) and fits the head. Returns the fewshot ids.
inline std::vector<std::string> adapt_to_scene(MeridModel& model, const SceneManifest& manifest,
                                               const SplitSpec& split, bool verbose = false) {
    AdaptConfig ac = model.config().adapt;
    ac.seed = model.config().seed;
    std::vector<std::string> fewshot = sample_fewshot(split, ac.k_views);
    std::vector<std::pair<RgbImage, RgbImage>> pairs;
    for (const auto& view : load_views(manifest, fewshot))
        pairs.emplace_back(model.enhance(view.low, /*with_head=*/false), view.normal);
    std::function<void(int, double)> progress;
    if (verbose)
        progress = [](int it, double loss) {
            if ((it + 1) % 200 == 0)
                std::printf("  adapt iter %d loss %.5f\n", it + 1, loss);
        };
    adapt_head(model.head(), model.head_params(), pairs, ac, progress);
    return fewshot;
}

// ---------------------------------------------------------------------------
// reconstruction and rendering
// ---------------------------------------------------------------------------

inline Bbox bbox_from_cameras(const std::vector<Camera>& cams) {
    require(!cams.empty(), "bbox: no cameras");
    Vec3 centroid{0, 0, 0};
    for (const auto& c : cams) {
        Vec3 p = c.center();
        for (int i = 0; i < 3; ++i) centroid[static_cast<std::size_t>(i)] += p[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < 3; ++i) centroid[static_cast<std::size_t>(i)] /= static_cast<double>(cams.size());
    double mean_d = 0.0;
    for (const auto& c : cams) {
        Vec3 p = c.center();
        double d2 = 0;
        for (int i = 0; i < 3; ++i) {
            double d = p[static_cast<std::size_t>(i)] - centroid[static_cast<std::size_t>(i)];
            d2 += d * d;
        }
        mean_d += std::sqrt(d2);
    }
    mean_d /= static_cast<double>(cams.size());
    // ring captures orbit the subject; the subject occupies the inner region
    Bbox box;
    for (int i = 0; i < 3; ++i) {
        box.lo[static_cast<std::size_t>(i)] = centroid[static_cast<std::size_t>(i)] - 0.6 * mean_d;
        box.hi[static_cast<std::size_t>(i)] = centroid[static_cast<std::size_t>(i)] + 0.6 * mean_d;
    }
    return box;
}

// Fits a gaussian scene to the given (image, camera) views.
inline GaussianScene reconstruct_scene(const std::vector<std::pair<RgbImage, Camera>>& views,
                                       const GsplatStageConfig& gc, std::uint64_t seed, bool verbose = false) {
    require(!views.empty(), "reconstruct: no views");
    std::vector<Camera> cams;
    for (const auto& [img, cam] : views) cams.push_back(cam);
    GaussianScene scene = init_scene_random(gc.n_init, bbox_from_cameras(cams), seed);
    // background: mean border color of the inputs, a stable first estimate
    Vec3 bg{0, 0, 0};
    std::size_t count = 0;
    for (const auto& [img, cam] : views) {
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < 3; ++c) {
                bg[static_cast<std::size_t>(c)] += img.at(c, 0, x) + img.at(c, img.height() - 1, x);
            }
        count += static_cast<std::size_t>(2 * img.width());
    }
    for (int c = 0; c < 3; ++c) bg[static_cast<std::size_t>(c)] /= static_cast<double>(count);
    scene.background = bg;
    OptimizeConfig oc = gc.optimize;
    oc.seed = seed + 7;
    oc.log_every = verbose ? 200 : 0;
    return optimize(std::move(scene), views, oc);
}

// ---------------------------------------------------------------------------
// LPIPS plug-in (external scorer command)
// ---------------------------------------------------------------------------

struct LpipsResult {
    bool available = false;
    double value = 0.0;
    std::string message;
};

// Runs `provider <pathA> <pathB>` and parses a single float from stdout.
// An empty provider yields "disabled"; failures are reported, never faked.
inline LpipsResult lpips_plugin(const std::string& provider, const std::string& path_a,
                                const std::string& path_b) {
    LpipsResult r;
    if (provider.empty()) {
        r.message = "disabled";
        return r;
    }
    std::string cmd = provider + " '" + path_a + "' '" + path_b + "' 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
        r.message = "lpips: unavailable (failed to start provider)";
        return r;
    }
    std::string output;
    char buf[256];
    while (std::fgets(buf, sizeof(buf), pipe)) output += buf;
    int rc = pclose(pipe);
    if (rc != 0) {
        r.message = "lpips: unavailable (" + output + ")";
        return r;
    }
    try {
        r.value = std::stod(output);
        r.available = true;
    } catch (const std::exception&) {
        r.message = "lpips: unavailable (unparseable output: " + output + ")";
    }
    return r;
}

inline LpipsResult lpips_plugin_images(const std::string& provider, const RgbImage& a, const RgbImage& b) {
    if (provider.empty())
        return {false, 0.0, "disabled"};
    fs::path dir = fs::temp_directory_path() / "merid_lpips";
    fs::create_directories(dir);
    std::string pa = (dir / "a.png").string(), pb = (dir / "b.png").string();
    save_png(pa, a);
    save_png(pb, b);
    return lpips_plugin(provider, pa, pb);
}

// ---------------------------------------------------------------------------
// evaluation protocols
// ---------------------------------------------------------------------------

inline MetricReport evaluate_pairs(const std::vector<std::pair<std::string, std::pair<RgbImage, RgbImage>>>& pairs,
                                   const std::string& lpips_provider = "") {
    std::vector<ViewMetrics> per_view;
    std::string lpips_note;
    for (const auto& [id, imgs] : pairs) {
        ViewMetrics vm;
        vm.view_id = id;
        double p = psnr(imgs.first, imgs.second);
        vm.identical = !std::isfinite(p);
        vm.psnr = vm.identical ? 0.0 : p;
        vm.ssim = ssim(imgs.first, imgs.second);
        LpipsResult lr = lpips_plugin_images(lpips_provider, imgs.first, imgs.second);
        vm.lpips_available = lr.available;
        vm.lpips = lr.available ? lr.value : -1.0;
        if (!lr.available && lr.message != "disabled")
            lpips_note = lr.message;
        per_view.push_back(vm);
    }
    MetricReport report = MetricReport::aggregate(per_view);
    report.lpips_note = lpips_note;
    return report;
}

// 2D enhancement metrics over the given ids, head off (zero-shot) vs head on
// (adapted). An identity head makes both rows equal.
inline std::pair<MetricReport, MetricReport> zero_shot_vs_adapted_report(const MeridModel& model,
                                                                         const SceneManifest& manifest,
                                                                         const std::vector<std::string>& ids,
                                                                         const std::string& lpips_provider = "") {
    require(!ids.empty(), "report: no views with ground truth");
    std::vector<std::pair<std::string, std::pair<RgbImage, RgbImage>>> zero, adapted;
    for (const auto& view : load_views(manifest, ids)) {
        zero.emplace_back(view.id, std::make_pair(model.enhance(view.low, false), view.normal));
        adapted.emplace_back(view.id, std::make_pair(model.enhance(view.low, true), view.normal));
    }
    return {evaluate_pairs(zero, lpips_provider), evaluate_pairs(adapted, lpips_provider)};
}

// ---------------------------------------------------------------------------
// full protocol: adapt, enhance, reconstruct, render, evaluate
// ---------------------------------------------------------------------------

struct PipelineRunResult {
    std::vector<std::string> fewshot_ids;
    GaussianScene scene;
    MetricReport test_report;          // rendered test views vs normal-light truth
    MetricReport enhanced_report;      // 2D enhancement quality on test views
    nlohmann::json timing;             // per-stage wall clock (seconds)
};

inline PipelineRunResult run_pipeline(MeridModel& model, const SceneManifest& manifest, const SplitSpec& split,
                                      const std::string& out_dir, bool do_adapt = true, bool verbose = false) {
    namespace chrono = std::chrono;
    auto now = [] { return chrono::steady_clock::now(); };
    auto secs = [](auto a, auto b) { return chrono::duration<double>(b - a).count(); };
    PipelineRunResult result;
    if (!out_dir.empty())
        fs::create_directories(out_dir);

    auto t0 = now();
    if (do_adapt && model.config().toggles.rf_head)
        result.fewshot_ids = adapt_to_scene(model, manifest, split, verbose);
    auto t1 = now();

    // enhance the reconstruction split (head applied when enabled)
    std::vector<std::pair<RgbImage, Camera>> recon_views;
    for (const auto& view : load_views(manifest, split.reconstruction)) {
        RgbImage enhanced = model.enhance(view.low, do_adapt);
        recon_views.emplace_back(enhanced, view.camera);
        if (!out_dir.empty())
            save_png((fs::path(out_dir) / ("enhanced_" + view.id + ".png")).string(), enhanced);
    }
    auto t2 = now();

    result.scene = reconstruct_scene(recon_views, model.config().gsplat, model.config().seed, verbose);
    auto t3 = now();

    std::vector<std::pair<std::string, std::pair<RgbImage, RgbImage>>> render_pairs, enhance_pairs;
    for (const auto& view : load_views(manifest, split.test)) {
        RenderOutput ro = render(result.scene, view.camera);
        render_pairs.emplace_back(view.id, std::make_pair(ro.image, view.normal));
        enhance_pairs.emplace_back(view.id, std::make_pair(model.enhance(view.low, do_adapt), view.normal));
        if (!out_dir.empty())
            save_png((fs::path(out_dir) / ("render_" + view.id + ".png")).string(), ro.image);
    }
    result.test_report = evaluate_pairs(render_pairs, model.config().lpips_provider);
    result.enhanced_report = evaluate_pairs(enhance_pairs, model.config().lpips_provider);
    auto t4 = now();

    result.timing = {{"adapt_s", secs(t0, t1)},
                     {"enhance_s", secs(t1, t2)},
                     {"reconstruct_s", secs(t2, t3)},
                     {"evaluate_s", secs(t3, t4)},
                     {"total_s", secs(t0, t4)}};
    if (!out_dir.empty()) {
        nlohmann::json j;
        j["scene"] = manifest.scene_name;
        j["fewshot"] = result.fewshot_ids;
        j["test_views"] = metric_report_to_json(result.test_report);
        j["enhanced_views"] = metric_report_to_json(result.enhanced_report);
        j["timing"] = result.timing;
        std::ofstream f(fs::path(out_dir) / "report.json");
        f << j.dump(2) << "\n";
    }
    return result;
}

// Camera-path file: JSON list of camera records (same schema as the manifest
// plus explicit resolution).
inline std::vector<Camera> load_camera_path(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        fail("cannot open camera path %s", path.c_str());
    nlohmann::json j;
    f >> j;
    std::vector<Camera> cams;
    for (const auto& jc : j) {
        Camera c;
        c.fx = jc.at("fx");
        c.fy = jc.at("fy");
        c.cx = jc.at("cx");
        c.cy = jc.at("cy");
        c.width = jc.at("width");
        c.height = jc.at("height");
        auto q = jc.at("qvec");
        c.rotation = quat_to_rotmat(q.at(0), q.at(1), q.at(2), q.at(3));
        auto t = jc.at("tvec");
        c.translation = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()};
        c.validate();
        cams.push_back(c);
    }
    require(!cams.empty(), "camera path is empty: " + path);
    return cams;
}

inline void save_camera_path(const std::string& path, const std::vector<Camera>& cams) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : cams) {
        auto q = rotmat_to_quat(c.rotation);
        j.push_back({{"fx", c.fx},
                     {"fy", c.fy},
                     {"cx", c.cx},
                     {"cy", c.cy},
                     {"width", c.width},
                     {"height", c.height},
                     {"qvec", {q[0], q[1], q[2], q[3]}},
                     {"tvec", {c.translation[0], c.translation[1], c.translation[2]}}});
    }
    std::ofstream f(path);
    if (!f)
        fail("cannot write camera path %s", path.c_str());
    f << j.dump(2) << "\n";
}

} // namespace merid

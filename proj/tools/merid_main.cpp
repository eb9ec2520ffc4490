// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
//
// merid: train, adapt and evaluate the low-light enhancement + gaussian
// splatting pipeline on paired multi-view scenes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>

#include "merid/checkpoint.hpp"
#include "merid/pipeline.hpp"
#include "merid/synth.hpp"

namespace fs = std::filesystem;
using namespace merid;

namespace {

struct CommonOpts {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

PipelineConfig load_config(const CommonOpts& opts) {
    IniFile ini = opts.config_path.empty() ? IniFile::parse("") : IniFile::parse_file(opts.config_path);
    PipelineConfig cfg = PipelineConfig::from_ini(ini);
    if (opts.seed_set)
        cfg.seed = opts.seed;
    cfg.sync_toggles();
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "INI config file; flags override its values");
    cmd->add_option("--seed", opts.seed, "global seed threading through all stages")
        ->each([&opts](const std::string&) { opts.seed_set = true; });
}

Tensor normalize_plane(const Tensor& plane) {
    Tensor out = plane;
    double lo = out.min(), hi = out.max();
    double span = hi - lo > 1e-12 ? hi - lo : 1.0;
    for (double& v : out.v) v = (v - lo) / span;
    return out;
}

void save_heatmap(const std::string& path, const Tensor& plane) {
    Tensor n = normalize_plane(plane);
    int H = n.dim(0), W = n.dim(1);
    RgbImage img(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = n.v[static_cast<std::size_t>(y) * W + x];
    save_png(path, img);
}

SplitSpec splits_for(const SceneManifest& m, std::uint64_t seed) { return make_splits(m, "uniform", seed); }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MERID-GS: low-light enhancement and gaussian-splatting novel view synthesis"};
    app.require_subcommand(1);

    // ---- synth-data ----
    auto* synth = app.add_subcommand("synth-data", "generate a synthetic paired low/normal scene");
    CommonOpts synth_opts;
    std::string synth_out;
    int synth_views = 12, synth_w = 64, synth_h = 64, synth_variant = 0;
    double deg_gamma = 2.2, deg_att = 0.15, deg_read = 0.01, deg_shot = 800.0;
    bool deg_no_illum = false;
    add_common(synth, synth_opts);
    synth->add_option("--out", synth_out, "output scene directory")->required();
    synth->add_option("--views", synth_views, "number of ring cameras");
    synth->add_option("--width", synth_w, "image width");
    synth->add_option("--height", synth_h, "image height");
    synth->add_option("--variant", synth_variant, "scene layout variant");
    synth->add_option("--gamma", deg_gamma, "degradation gamma exponent");
    synth->add_option("--attenuation", deg_att, "degradation attenuation in (0,1]");
    synth->add_option("--noise-read", deg_read, "gaussian read-noise std");
    synth->add_option("--noise-shot", deg_shot, "poisson shot-noise scale (0 disables)");
    synth->add_flag("--no-illum-field", deg_no_illum, "disable the smooth illumination field");

    // ---- train-base ----
    auto* train = app.add_subcommand("train-base", "train the enhancement stages on a base scene");
    CommonOpts train_opts;
    std::string train_scene, train_ckpt, train_setting = "full";
    int train_iters = -1;
    bool train_resume = false;
    add_common(train, train_opts);
    train->add_option("--scene", train_scene, "base scene directory")->required();
    train->add_option("--checkpoint", train_ckpt, "output checkpoint path")->required();
    train->add_option("--iters", train_iters, "override training iterations");
    train->add_option("--setting", train_setting, "ablation setting: 1, 2, 3, 4 or full");
    train->add_flag("--resume", train_resume, "continue from an existing checkpoint");

    // ---- adapt ----
    auto* adapt = app.add_subcommand("adapt", "few-shot adaptation of the reflection head");
    CommonOpts adapt_opts;
    std::string adapt_scene, adapt_ckpt, adapt_out;
    int adapt_views = -1, adapt_iters = -1;
    add_common(adapt, adapt_opts);
    adapt->add_option("--scene", adapt_scene, "scene directory")->required();
    adapt->add_option("--checkpoint", adapt_ckpt, "base checkpoint")->required();
    adapt->add_option("--out", adapt_out, "output .head sidecar path")->required();
    adapt->add_option("--views", adapt_views, "few-shot view count (default 10)");
    adapt->add_option("--iters", adapt_iters, "adaptation iterations (default 800)");

    // ---- enhance ----
    auto* enhance = app.add_subcommand("enhance", "enhance the low-light views of a scene");
    CommonOpts enh_opts;
    std::string enh_scene, enh_ckpt, enh_head, enh_out, enh_debug;
    bool enh_no_head = false;
    add_common(enhance, enh_opts);
    enhance->add_option("--scene", enh_scene, "scene directory")->required();
    enhance->add_option("--checkpoint", enh_ckpt, "base checkpoint")->required();
    enhance->add_option("--head", enh_head, "adapted .head sidecar");
    enhance->add_option("--out", enh_out, "output directory")->required();
    enhance->add_flag("--no-head", enh_no_head, "zero-shot: skip the reflection head");
    enhance->add_option("--debug-dir", enh_debug, "dump gain/gate/band diagnostics as PNG heatmaps");

    // ---- reconstruct ----
    auto* recon = app.add_subcommand("reconstruct", "fit a gaussian scene to enhanced views");
    CommonOpts rec_opts;
    std::string rec_scene, rec_ckpt, rec_head, rec_out;
    int rec_iters = -1;
    bool rec_raw = false;
    add_common(recon, rec_opts);
    recon->add_option("--scene", rec_scene, "scene directory")->required();
    recon->add_option("--checkpoint", rec_ckpt, "base checkpoint (omit with --raw)");
    recon->add_option("--head", rec_head, "adapted .head sidecar");
    recon->add_option("--out", rec_out, "output gaussian scene file (.json)")->required();
    recon->add_option("--iters", rec_iters, "override optimization iterations");
    recon->add_flag("--raw", rec_raw, "reconstruct from the raw low-light views");

    // ---- render ----
    auto* rend = app.add_subcommand("render", "render a gaussian scene along a camera path");
    CommonOpts rend_opts;
    std::string rend_scene_file, rend_path, rend_out;
    add_common(rend, rend_opts);
    rend->add_option("--scene-file", rend_scene_file, "gaussian scene .json")->required();
    rend->add_option("--camera-path", rend_path, "JSON list of camera records")->required();
    rend->add_option("--out", rend_out, "output directory")->required();

    // ---- evaluate ----
    auto* eval = app.add_subcommand("evaluate", "zero-shot vs adapted enhancement metrics");
    CommonOpts eval_opts;
    std::string eval_scene, eval_ckpt, eval_head, eval_report, eval_lpips;
    add_common(eval, eval_opts);
    eval->add_option("--scene", eval_scene, "scene directory")->required();
    eval->add_option("--checkpoint", eval_ckpt, "base checkpoint")->required();
    eval->add_option("--head", eval_head, "adapted .head sidecar");
    eval->add_option("--report", eval_report, "output report JSON")->required();
    eval->add_option("--lpips-provider", eval_lpips, "external LPIPS scorer command");

    // ---- run ----
    auto* run = app.add_subcommand("run", "full protocol: adapt, enhance, reconstruct, render, evaluate");
    CommonOpts run_opts;
    std::string run_scene, run_ckpt, run_out;
    bool run_no_adapt = false;
    add_common(run, run_opts);
    run->add_option("--scene", run_scene, "scene directory")->required();
    run->add_option("--checkpoint", run_ckpt, "base checkpoint")->required();
    run->add_option("--out", run_out, "output directory")->required();
    run->add_flag("--no-adapt", run_no_adapt, "zero-shot protocol (skip adaptation)");

    // ---- ablate ----
    auto* ablate = app.add_subcommand("ablate", "train and evaluate one ablation setting");
    CommonOpts abl_opts;
    std::string abl_scene, abl_eval_scene, abl_setting = "full", abl_out;
    int abl_iters = -1;
    add_common(ablate, abl_opts);
    ablate->add_option("--scene", abl_scene, "base training scene")->required();
    ablate->add_option("--eval-scene", abl_eval_scene, "held-out scene (defaults to the base scene)");
    ablate->add_option("--setting", abl_setting, "1, 2, 3, 4 or full")->required();
    ablate->add_option("--out", abl_out, "output directory")->required();
    ablate->add_option("--iters", abl_iters, "override training iterations");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            PipelineConfig cfg = load_config(synth_opts);
            DegradationSpec deg;
            deg.gamma = deg_gamma;
            deg.attenuation = deg_att;
            deg.noise_read = deg_read;
            deg.noise_shot = deg_shot;
            deg.seed = cfg.seed;
            if (!deg_no_illum)
                deg.spatial_illum = make_smooth_illum(synth_h, synth_w, cfg.seed + 1);
            GaussianScene gt;
            SceneManifest m = synth_scene(default_synth_scene(synth_variant), synth_views, synth_w, synth_h,
                                          cfg.seed, deg, synth_out, &gt);
            save_scene((fs::path(synth_out) / "ground_truth_gaussians.json").string(), gt);
            std::printf("wrote %zu views at %dx%d to %s\n", m.views.size(), m.width, m.height,
                        synth_out.c_str());
        } else if (*train) {
            PipelineConfig cfg = load_config(train_opts);
            cfg.toggles = Toggles::for_setting(train_setting);
            cfg.sync_toggles();
            if (train_iters > 0)
                cfg.train.iters = train_iters;
            SceneManifest m = load_manifest(train_scene);
            SplitSpec split = splits_for(m, cfg.seed);
            MeridModel model = (train_resume && fs::exists(train_ckpt)) ? load_checkpoint(train_ckpt)
                                                                        : MeridModel(cfg);
            TrainResult r = run_train_base(model, m, split, train_ckpt, /*verbose=*/true);
            std::printf("trained to step %ld; val PSNR %.2f dB -> %.2f dB; checkpoint %s\n", model.step,
                        r.initial_val_psnr, r.final_val_psnr, train_ckpt.c_str());
        } else if (*adapt) {
            PipelineConfig cfg = load_config(adapt_opts);
            MeridModel model = load_checkpoint(adapt_ckpt);
            if (adapt_views > 0 || adapt_iters > 0 || adapt_opts.seed_set) {
                PipelineConfig mc = model.config();
                if (adapt_views > 0)
                    mc.adapt.k_views = adapt_views;
                if (adapt_iters > 0)
                    mc.adapt.iters = adapt_iters;
                if (adapt_opts.seed_set)
                    mc.seed = cfg.seed;
                MeridModel rebuilt(mc);
                for (const auto& n : rebuilt.retinex_params().names())
                    rebuilt.retinex_params().load_value(n, model.retinex_params().get(n)->val);
                for (const auto& n : rebuilt.isfga_params().names())
                    rebuilt.isfga_params().load_value(n, model.isfga_params().get(n)->val);
                rebuilt.step = model.step;
                model = std::move(rebuilt);
            }
            SceneManifest m = load_manifest(adapt_scene);
            SplitSpec split = splits_for(m, model.config().seed);
            auto t0 = std::chrono::steady_clock::now();
            auto ids = adapt_to_scene(model, m, split, /*verbose=*/true);
            double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            save_head(adapt_out, model);
            std::printf("adapted on %zu views in %.1f s; head written to %s\n", ids.size(), secs,
                        adapt_out.c_str());
        } else if (*enhance) {
            MeridModel model = load_checkpoint(enh_ckpt);
            if (!enh_head.empty())
                load_head(enh_head, model);
            SceneManifest m = load_manifest(enh_scene);
            fs::create_directories(enh_out);
            bool with_head = !enh_no_head && !enh_head.empty();
            for (const auto& view : load_views(m, all_ids(m))) {
                EnhanceDiagnostics diag;
                RgbImage out = model.enhance(view.low, with_head, enh_debug.empty() ? nullptr : &diag);
                save_png((fs::path(enh_out) / (view.id + ".png")).string(), out);
                if (!enh_debug.empty()) {
                    fs::create_directories(enh_debug);
                    save_heatmap((fs::path(enh_debug) / (view.id + "_gain.png")).string(),
                                 Tensor({diag.gain.dim(1), diag.gain.dim(2)}, diag.gain.v));
                    for (std::size_t gi = 0; gi < diag.attn.gates.size(); ++gi) {
                        const Tensor& g = diag.attn.gates[gi];
                        Tensor mean({g.dim(1), g.dim(2)});
                        std::size_t hw = mean.numel();
                        for (int c = 0; c < g.dim(0); ++c)
                            for (std::size_t i = 0; i < hw; ++i) mean.v[i] += g.v[c * hw + i] / g.dim(0);
                        save_heatmap((fs::path(enh_debug) / (view.id + "_gate" + std::to_string(gi) + ".png")).string(),
                                     mean);
                    }
                    nlohmann::json je;
                    je["band_energy"] = diag.attn.band_energy;
                    std::ofstream f(fs::path(enh_debug) / (view.id + "_bands.json"));
                    f << je.dump(2) << "\n";
                }
            }
            std::printf("enhanced %zu views into %s\n", m.views.size(), enh_out.c_str());
        } else if (*recon) {
            PipelineConfig cfg = load_config(rec_opts);
            SceneManifest m = load_manifest(rec_scene);
            std::vector<std::pair<RgbImage, Camera>> views;
            GsplatStageConfig gc = cfg.gsplat;
            std::uint64_t seed = cfg.seed;
            if (rec_raw) {
                SplitSpec split = splits_for(m, seed);
                for (const auto& view : load_views(m, split.reconstruction))
                    views.emplace_back(view.low, view.camera);
            } else {
                require(!rec_ckpt.empty(), "reconstruct: --checkpoint required unless --raw");
                MeridModel model = load_checkpoint(rec_ckpt);
                if (!rec_head.empty())
                    load_head(rec_head, model);
                gc = model.config().gsplat;
                seed = model.config().seed;
                SplitSpec split = splits_for(m, seed);
                for (const auto& view : load_views(m, split.reconstruction))
                    views.emplace_back(model.enhance(view.low, !rec_head.empty()), view.camera);
            }
            if (rec_iters > 0)
                gc.optimize.iters = rec_iters;
            GaussianScene scene = reconstruct_scene(views, gc, seed, /*verbose=*/true);
            save_scene(rec_out, scene);
            std::printf("reconstructed %zu gaussians from %zu views -> %s\n", scene.gaussians.size(),
                        views.size(), rec_out.c_str());
        } else if (*rend) {
            GaussianScene scene = load_scene(rend_scene_file);
            auto cams = load_camera_path(rend_path);
            fs::create_directories(rend_out);
            for (std::size_t i = 0; i < cams.size(); ++i) {
                RenderOutput out = render(scene, cams[i]);
                char name[32];
                std::snprintf(name, sizeof(name), "frame_%04zu.png", i);
                save_png((fs::path(rend_out) / name).string(), out.image);
            }
            std::printf("rendered %zu frames into %s\n", cams.size(), rend_out.c_str());
        } else if (*eval) {
            MeridModel model = load_checkpoint(eval_ckpt);
            if (!eval_head.empty())
                load_head(eval_head, model);
            SceneManifest m = load_manifest(eval_scene);
            SplitSpec split = splits_for(m, model.config().seed);
            auto [zero, adapted] = zero_shot_vs_adapted_report(model, m, split.test, eval_lpips);
            nlohmann::json j;
            j["scene"] = m.scene_name;
            j["zero_shot"] = metric_report_to_json(zero);
            j["adapted"] = metric_report_to_json(adapted);
            std::ofstream f(eval_report);
            require(static_cast<bool>(f), "cannot write report " + eval_report);
            f << j.dump(2) << "\n";
            std::printf("zero-shot PSNR %.2f dB / adapted PSNR %.2f dB -> %s\n", zero.psnr, adapted.psnr,
                        eval_report.c_str());
        } else if (*run) {
            MeridModel model = load_checkpoint(run_ckpt);
            SceneManifest m = load_manifest(run_scene);
            SplitSpec split = splits_for(m, model.config().seed);
            PipelineRunResult res = run_pipeline(model, m, split, run_out, !run_no_adapt, /*verbose=*/true);
            std::printf("test-view render PSNR %.2f dB SSIM %.3f; report in %s\n", res.test_report.psnr,
                        res.test_report.ssim, run_out.c_str());
        } else if (*ablate) {
            PipelineConfig cfg = load_config(abl_opts);
            cfg.toggles = Toggles::for_setting(abl_setting);
            cfg.sync_toggles();
            if (abl_iters > 0)
                cfg.train.iters = abl_iters;
            SceneManifest base = load_manifest(abl_scene);
            SplitSpec base_split = splits_for(base, cfg.seed);
            fs::create_directories(abl_out);
            auto t0 = std::chrono::steady_clock::now();
            MeridModel model(cfg);
            std::string ckpt = (fs::path(abl_out) / ("setting_" + abl_setting + ".ckpt")).string();
            run_train_base(model, base, base_split, ckpt, /*verbose=*/true);
            SceneManifest eval_m = abl_eval_scene.empty() ? base : load_manifest(abl_eval_scene);
            SplitSpec eval_split = splits_for(eval_m, cfg.seed);
            PipelineRunResult res =
                run_pipeline(model, eval_m, eval_split, (fs::path(abl_out) / ("setting_" + abl_setting)).string());
            double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            nlohmann::json row;
            row["setting"] = abl_setting;
            row["toggles"] = {{"erid", cfg.toggles.erid}, {"isfga", cfg.toggles.isfga}, {"rf_head", cfg.toggles.rf_head}};
            row["test_views"] = metric_report_to_json(res.test_report);
            row["enhanced_views"] = metric_report_to_json(res.enhanced_report);
            row["wall_clock_s"] = secs;
            std::ofstream f(fs::path(abl_out) / ("setting_" + abl_setting + ".json"));
            f << row.dump(2) << "\n";
            std::printf("setting %s: render PSNR %.2f dB (%.0f s)\n", abl_setting.c_str(),
                        res.test_report.psnr, secs);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

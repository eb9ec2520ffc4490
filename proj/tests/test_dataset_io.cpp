// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "merid/camera.hpp"
#include "merid/image.hpp"
#include "merid/manifest.hpp"
#include "merid/synth.hpp"

using namespace merid;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("merid_test_" + std::to_string(Catch::rngSeed()) + "_" +
                                            std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

RgbImage checker(int h, int w, double a = 0.2, double b = 0.8) {
    RgbImage img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = ((x + y) % 2 == 0) ? a : b;
    return img;
}

void write_pair_scene(const fs::path& root, const std::vector<std::string>& ids, int h = 8, int w = 8) {
    fs::create_directories(root / "low");
    fs::create_directories(root / "normal");
    fs::create_directories(root / "colmap");
    std::vector<std::pair<std::string, Camera>> named;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        RgbImage img = checker(h, w, 0.1 + 0.05 * static_cast<double>(i % 3), 0.7);
        save_png((root / "low" / (ids[i] + ".png")).string(), img);
        save_png((root / "normal" / (ids[i] + ".png")).string(), img);
        Camera cam;
        cam.fx = cam.fy = 10.0;
        cam.cx = w / 2.0;
        cam.cy = h / 2.0;
        cam.width = w;
        cam.height = h;
        cam.translation = {0.1 * static_cast<double>(i), 0, 2};
        named.emplace_back(ids[i] + ".png", cam);
    }
    write_colmap_text((root / "colmap" / "cameras.txt").string(), (root / "colmap" / "images.txt").string(),
                      named);
}

// independent quaternion oracle: rotate basis vectors with q v q*
Mat3 quat_oracle(double w, double x, double y, double z) {
    auto rotate = [&](double vx, double vy, double vz) {
        // q * (0,v) * conj(q)
        double tw = -x * vx - y * vy - z * vz;
        double tx = w * vx + y * vz - z * vy;
        double ty = w * vy + z * vx - x * vz;
        double tz = w * vz + x * vy - y * vx;
        return std::array<double, 3>{tx * w - tw * x - ty * z + tz * y, ty * w - tw * y - tz * x + tx * z,
                                     tz * w - tw * z - tx * y + ty * x};
    };
    auto e1 = rotate(1, 0, 0), e2 = rotate(0, 1, 0), e3 = rotate(0, 0, 1);
    return {e1[0], e2[0], e3[0], e1[1], e2[1], e3[1], e1[2], e2[2], e3[2]};
}

} // namespace

TEST_CASE("png round trip preserves 8-bit data", "[dataset_io]") {
    TempDir td;
    RgbImage img = checker(12, 10, 0.0, 1.0);
    img.at(0, 3, 4) = 100.0 / 255.0;
    std::string p = (td.path / "img.png").string();
    save_png(p, img);
    RgbImage back = load_image(p);
    REQUIRE(back.height() == 12);
    REQUIRE(back.width() == 10);
    CHECK(max_abs_diff(back.t, img.t) < 0.5 / 255.0);
}

TEST_CASE("load_manifest enumerates paired views", "[dataset_io]") {
    TempDir td;
    write_pair_scene(td.path, {"b", "a"});
    SceneManifest m = load_manifest(td.path.string());
    REQUIRE(m.views.size() == 2);
    CHECK(m.views[0].id == "a"); // sorted lexicographically
    CHECK(m.views[1].id == "b");
    CHECK(m.width == 8);
}

TEST_CASE("load_manifest rejects orphans and empty folders", "[dataset_io]") {
    TempDir td;
    write_pair_scene(td.path, {"a", "b"});
    fs::remove(td.path / "normal" / "b.png");
    CHECK_THROWS_WITH(load_manifest(td.path.string()), Catch::Matchers::ContainsSubstring("unpaired view b"));

    TempDir empty;
    fs::create_directories(empty.path / "low");
    fs::create_directories(empty.path / "normal");
    CHECK_THROWS_WITH(load_manifest(empty.path.string()), Catch::Matchers::ContainsSubstring("no views found"));
}

TEST_CASE("quaternion conversion matches the sandwich-product oracle", "[dataset_io]") {
    // identity
    Mat3 r = quat_to_rotmat(1, 0, 0, 0);
    Mat3 id{1, 0, 0, 0, 1, 0, 0, 0, 1};
    for (int i = 0; i < 9; ++i) CHECK(r[static_cast<std::size_t>(i)] == Catch::Approx(id[static_cast<std::size_t>(i)]).margin(1e-12));

    // (0,1,0,0) -> diag(1,-1,-1)
    Mat3 rx = quat_to_rotmat(0, 1, 0, 0);
    Mat3 expect{1, 0, 0, 0, -1, 0, 0, 0, -1};
    for (int i = 0; i < 9; ++i) CHECK(rx[static_cast<std::size_t>(i)] == Catch::Approx(expect[static_cast<std::size_t>(i)]).margin(1e-12));

    // random unit quaternions against the independent oracle
    Rng rng(3);
    for (int k = 0; k < 25; ++k) {
        double q[4];
        double n = 0;
        for (double& c : q) {
            c = rng.normal();
            n += c * c;
        }
        n = std::sqrt(n);
        for (double& c : q) c /= n;
        Mat3 a = quat_to_rotmat(q[0], q[1], q[2], q[3]);
        Mat3 b = quat_oracle(q[0], q[1], q[2], q[3]);
        for (int i = 0; i < 9; ++i)
            CHECK(a[static_cast<std::size_t>(i)] == Catch::Approx(b[static_cast<std::size_t>(i)]).margin(1e-12));
    }
}

TEST_CASE("colmap parser handles pinhole models and rejects bad input", "[dataset_io]") {
    TempDir td;
    {
        std::ofstream cf(td.path / "cameras.txt");
        cf << "# comment line\n";
        cf << "1 PINHOLE 8 6 10 11 4 3\n";
        cf << "2 SIMPLE_PINHOLE 8 6 9 4 3\n";
        std::ofstream imf(td.path / "images.txt");
        imf << "1 1 0 0 0 0.5 0 2 1 a.png\n\n";
        imf << "2 0 1 0 0 0 0 2 2 b.png\n\n";
    }
    auto cams = parse_colmap_text((td.path / "cameras.txt").string(), (td.path / "images.txt").string());
    REQUIRE(cams.size() == 2);
    CHECK(cams.at("a.png").fx == 10.0);
    CHECK(cams.at("a.png").fy == 11.0);
    CHECK(cams.at("b.png").fx == 9.0);
    CHECK(cams.at("b.png").fy == 9.0); // SIMPLE_PINHOLE: f -> fx = fy
    CHECK(cams.at("b.png").rotation[4] == Catch::Approx(-1.0));

    {
        std::ofstream cf(td.path / "bad_cameras.txt");
        cf << "1 OPENCV 8 6 1 1 4 3 0 0 0 0\n";
    }
    CHECK_THROWS_WITH(parse_colmap_text((td.path / "bad_cameras.txt").string(), (td.path / "images.txt").string()),
                      Catch::Matchers::ContainsSubstring("OPENCV"));

    {
        std::ofstream cf(td.path / "cameras2.txt");
        cf << "1 PINHOLE 8 6 10 10 4 3\n";
        std::ofstream imf(td.path / "bad_images.txt");
        imf << "1 2 0 0 0 0 0 2 1 a.png\n\n"; // quaternion norm 2
    }
    CHECK_THROWS_WITH(parse_colmap_text((td.path / "cameras2.txt").string(), (td.path / "bad_images.txt").string()),
                      Catch::Matchers::ContainsSubstring("non-unit quaternion"));
}

TEST_CASE("camera pose round trips through colmap text", "[dataset_io]") {
    TempDir td;
    Rng rng(9);
    std::vector<std::pair<std::string, Camera>> named;
    for (int i = 0; i < 5; ++i) {
        double q[4];
        double n = 0;
        for (double& c : q) {
            c = rng.normal();
            n += c * c;
        }
        n = std::sqrt(n);
        for (double& c : q) c /= n;
        Camera cam;
        cam.fx = 50 + i;
        cam.fy = 51 + i;
        cam.cx = 16;
        cam.cy = 12;
        cam.width = 32;
        cam.height = 24;
        cam.rotation = quat_to_rotmat(q[0], q[1], q[2], q[3]);
        cam.translation = {rng.normal(), rng.normal(), rng.normal()};
        named.emplace_back("v" + std::to_string(i) + ".png", cam);
    }
    write_colmap_text((td.path / "cameras.txt").string(), (td.path / "images.txt").string(), named);
    auto cams = parse_colmap_text((td.path / "cameras.txt").string(), (td.path / "images.txt").string());
    for (const auto& [name, cam] : named) {
        const Camera& back = cams.at(name);
        double frob = 0;
        for (int i = 0; i < 9; ++i) {
            double d = back.rotation[static_cast<std::size_t>(i)] - cam.rotation[static_cast<std::size_t>(i)];
            frob += d * d;
        }
        CHECK(std::sqrt(frob) < 1e-6);
        for (int i = 0; i < 3; ++i)
            CHECK(back.translation[static_cast<std::size_t>(i)] ==
                  Catch::Approx(cam.translation[static_cast<std::size_t>(i)]).margin(1e-12));
    }
}

TEST_CASE("splits follow the 75/25/12.5 protocol", "[dataset_io]") {
    auto fake_manifest = [](int n) {
        SceneManifest m;
        for (int i = 0; i < n; ++i) {
            ViewEntry v;
            char buf[16];
            std::snprintf(buf, sizeof(buf), "v%03d", i);
            v.id = buf;
            m.views.push_back(v);
        }
        return m;
    };

    SplitSpec s16 = make_splits(fake_manifest(16), "uniform", 0);
    CHECK(s16.preprocess_train.size() == 12);
    CHECK(s16.reconstruction.size() == 4);
    CHECK(s16.test.size() == 2);

    SplitSpec s8 = make_splits(fake_manifest(8), "uniform", 0);
    CHECK(s8.preprocess_train.size() == 6);
    CHECK(s8.reconstruction.size() == 2);
    CHECK(s8.test.size() == 1);

    CHECK_THROWS(make_splits(fake_manifest(7), "uniform", 0));

    // determinism: identical inputs give identical splits
    SplitSpec again = make_splits(fake_manifest(16), "uniform", 0);
    CHECK(again.preprocess_train == s16.preprocess_train);
    CHECK(again.test == s16.test);

    // partition property across sizes
    for (int n = 8; n <= 41; ++n) {
        SceneManifest m = fake_manifest(n);
        SplitSpec s = make_splits(m, "uniform", 1);
        CHECK(s.preprocess_train.size() + s.reconstruction.size() == static_cast<std::size_t>(n));
        std::set<std::string> train(s.preprocess_train.begin(), s.preprocess_train.end());
        std::set<std::string> recon(s.reconstruction.begin(), s.reconstruction.end());
        for (const auto& id : train) CHECK_FALSE(recon.count(id));
        for (const auto& id : s.test) CHECK(recon.count(id));
        long diff = std::labs(static_cast<long>(s.preprocess_train.size()) -
                              static_cast<long>(0.75 * n));
        CHECK(diff <= 1);
    }
}

TEST_CASE("fewshot sampling is a uniform stride", "[dataset_io]") {
    SplitSpec split;
    for (int i = 0; i < 100; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "v%03d", i);
        split.preprocess_train.push_back(buf);
    }
    auto ten = sample_fewshot(split, 10);
    REQUIRE(ten.size() == 10);
    for (int i = 0; i < 10; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "v%03d", i * 10);
        CHECK(ten[static_cast<std::size_t>(i)] == buf);
    }
    auto all = sample_fewshot(split, 100);
    CHECK(all == split.preprocess_train);
    CHECK_THROWS(sample_fewshot(split, 101));
}

TEST_CASE("downsample is an exact area mean", "[dataset_io]") {
    // constant image stays constant
    RgbImage c = RgbImage::constant(16, 24, 0.37, 0.21, 0.9);
    RgbImage d = downsample(c, 3, 2);
    const double expect[3] = {0.37, 0.21, 0.9};
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 3; ++x) CHECK(d.at(ch, y, x) == Catch::Approx(expect[ch]).margin(1e-12));

    // 2x2 checkerboard of {0,1} collapses to 0.5
    RgbImage cb = checker(2, 2, 0.0, 1.0);
    RgbImage one = downsample(cb, 1, 1);
    for (int ch = 0; ch < 3; ++ch) CHECK(one.at(ch, 0, 0) == Catch::Approx(0.5).margin(1e-12));

    // exact integer factor 8 (the production geometry scaled down)
    RgbImage big(24, 32);
    Rng rng(4);
    for (double& v : big.t.v) v = rng.uniform();
    RgbImage small = downsample(big, 4, 3);
    for (int ch = 0; ch < 3; ++ch) {
        double mean = 0;
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) mean += big.at(ch, y, x);
        mean /= 64.0;
        CHECK(small.at(ch, 0, 0) == Catch::Approx(mean).margin(1e-12));
    }

    CHECK_THROWS(downsample(big, 64, 8)); // upscaling refused
}

TEST_CASE("degradation model is deterministic and monotone", "[dataset_io]") {
    RgbImage img = checker(8, 8, 0.2, 0.9);

    DegradationSpec identity;
    identity.gamma = 1.0;
    identity.attenuation = 1.0;
    RgbImage same = apply_degradation(img, identity);
    CHECK(max_abs_diff(same.t, img.t) < 1e-12);

    DegradationSpec att;
    att.gamma = 1.0;
    att.attenuation = 0.1;
    RgbImage ones = RgbImage::constant(8, 8, 1, 1, 1);
    RgbImage dark = apply_degradation(ones, att);
    for (double v : dark.t.v) CHECK(v == Catch::Approx(0.1).margin(1e-12));

    DegradationSpec noisy;
    noisy.noise_read = 0.05;
    noisy.noise_shot = 500;
    noisy.seed = 42;
    RgbImage n1 = apply_degradation(img, noisy);
    RgbImage n2 = apply_degradation(img, noisy);
    CHECK(max_abs_diff(n1.t, n2.t) == 0.0); // bit-identical
    noisy.seed = 43;
    RgbImage n3 = apply_degradation(img, noisy);
    CHECK(max_abs_diff(n1.t, n3.t) > 0.0);

    // zero-noise monotonicity in input intensity
    DegradationSpec mono;
    mono.gamma = 2.2;
    mono.attenuation = 0.4;
    mono.spatial_illum = make_smooth_illum(8, 8, 7, 0.5, 1.0);
    Rng rng(11);
    for (int k = 0; k < 50; ++k) {
        double a = rng.uniform(), b = rng.uniform();
        if (a > b)
            std::swap(a, b);
        RgbImage ia = RgbImage::constant(8, 8, a, a, a);
        RgbImage ib = RgbImage::constant(8, 8, b, b, b);
        RgbImage oa = apply_degradation(ia, mono), ob = apply_degradation(ib, mono);
        for (std::size_t i = 0; i < oa.t.numel(); ++i) CHECK(oa.t.v[i] <= ob.t.v[i] + 1e-12);
    }
}

TEST_CASE("synthetic scene renders deterministic ring views", "[dataset_io]") {
    SynthSceneSpec spec;
    SynthPrimitive p;
    p.kind = SynthPrimitive::Kind::Sphere;
    p.center = {0, 0, 0.3};
    p.extent = {0.6, 0.6, 0.6};
    p.color = {0.9, 0.1, 0.1};
    spec.primitives.push_back(p);

    SynthViews sv = synth_views(spec, 4, 32, 32, 1);
    REQUIRE(sv.views.size() == 4);
    for (const auto& [cam, img] : sv.views) {
        // a red disc: the center ray hits the sphere (red dominates even in
        // ambient-only shading), the corner ray sees pure background
        CHECK(img.at(0, 16, 16) >= 0.9 * spec.ambient - 1e-9);
        CHECK(img.at(0, 16, 16) > img.at(2, 16, 16) + 0.15);
        CHECK(img.at(0, 0, 0) == Catch::Approx(spec.background[0]).margin(1e-12));
    }
    SynthViews sv2 = synth_views(spec, 4, 32, 32, 1);
    for (std::size_t i = 0; i < sv.views.size(); ++i)
        CHECK(max_abs_diff(sv.views[i].second.t, sv2.views[i].second.t) == 0.0);

    CHECK_THROWS_WITH(synth_views(spec, 1, 32, 32, 1), Catch::Matchers::ContainsSubstring("at least 2 views"));
    SynthSceneSpec degenerate = spec;
    degenerate.ring_radius = 0.0;
    CHECK_THROWS_WITH(synth_views(degenerate, 4, 32, 32, 1),
                      Catch::Matchers::ContainsSubstring("degenerate camera placement"));
}

TEST_CASE("synth_scene writes a loadable paired directory", "[dataset_io]") {
    TempDir td;
    DegradationSpec deg;
    deg.attenuation = 0.2;
    deg.noise_read = 0.01;
    deg.seed = 5;
    GaussianScene gt;
    SceneManifest m = synth_scene(default_synth_scene(0), 8, 24, 16, 3, deg, td.path.string(), &gt);
    CHECK(m.views.size() == 8);
    CHECK(m.width == 24);
    CHECK(gt.gaussians.size() > 4);
    // manifest JSON round trip
    SceneManifest loaded = load_manifest_json((td.path / "manifest.json").string());
    CHECK(loaded.views.size() == m.views.size());
    CHECK(loaded.scene_name == m.scene_name);
    for (std::size_t i = 0; i < m.views.size(); ++i) {
        CHECK(loaded.views[i].id == m.views[i].id);
        double frob = 0;
        for (int k = 0; k < 9; ++k) {
            double d = loaded.views[i].camera.rotation[static_cast<std::size_t>(k)] -
                       m.views[i].camera.rotation[static_cast<std::size_t>(k)];
            frob += d * d;
        }
        CHECK(std::sqrt(frob) < 1e-6);
    }
}

// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "merid/camera.hpp"
#include "merid/common.hpp"
#include "merid/image.hpp"

namespace merid {

namespace fs = std::filesystem;

struct ViewEntry {
    std::string id; // filename stem, unique within a scene
    std::string low_path;
    std::string normal_path;
    Camera camera;
};

struct SceneManifest {
    std::string scene_name;
    int width = 0, height = 0;
    std::vector<ViewEntry> views; // sorted by id

    const ViewEntry& view(const std::string& id) const {
        for (const auto& v : views)
            if (v.id == id)
                return v;
        fail("unknown view id '%s'", id.c_str());
    }
};

// Deterministic scene splits. All members are sorted view-id lists except
// fewshot, which keeps its sampling order.
struct SplitSpec {
    std::vector<std::string> preprocess_train;
    std::vector<std::string> reconstruction;
    std::vector<std::string> test;
    std::vector<std::string> fewshot;
};

namespace manifest_detail {

inline bool image_ext(const fs::path& p) {
    std::string e = p.extension().string();
    for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return e == ".png" || e == ".jpg" || e == ".jpeg";
}

inline std::map<std::string, fs::path> list_images(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    require(fs::is_directory(dir), "missing directory " + dir.string());
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && image_ext(e.path()))
            out[e.path().stem().string()] = e.path();
    return out;
}

} // namespace manifest_detail

// Loads a paired low/normal scene directory:
//   <root>/low/*.png|jpg, <root>/normal/*.png|jpg,
//   <root>/colmap/cameras.txt, <root>/colmap/images.txt
// Views are the intersection of filenames present in both folders, sorted
// lexicographically; any orphan file is an error.
inline SceneManifest load_manifest(const std::string& root_path) {
    fs::path root(root_path);
    auto low = manifest_detail::list_images(root / "low");
    auto normal = manifest_detail::list_images(root / "normal");
    if (low.empty() && normal.empty())
        fail("no views found in %s", root_path.c_str());
    for (const auto& [id, p] : low)
        if (!normal.count(id))
            fail("unpaired view %s (missing normal image)", id.c_str());
    for (const auto& [id, p] : normal)
        if (!low.count(id))
            fail("unpaired view %s (missing low image)", id.c_str());

    fs::path cam_file = root / "colmap" / "cameras.txt";
    fs::path img_file = root / "colmap" / "images.txt";
    require(fs::exists(cam_file) && fs::exists(img_file),
            "missing pose source " + (root / "colmap").string());
    auto cameras = parse_colmap_text(cam_file.string(), img_file.string());

    SceneManifest m;
    m.scene_name = root.filename().string();
    for (const auto& [id, low_path] : low) {
        ViewEntry v;
        v.id = id;
        v.low_path = low_path.string();
        v.normal_path = normal.at(id).string();
        // images.txt names carry the original extension
        auto it = cameras.find(low_path.filename().string());
        if (it == cameras.end())
            it = cameras.find(id);
        if (it == cameras.end())
            fail("no camera pose for view %s", id.c_str());
        v.camera = it->second;
        m.views.push_back(std::move(v));
    }
    if (cameras.size() != m.views.size())
        fail("pose count (%zu) does not match paired view count (%zu)", cameras.size(), m.views.size());
    std::sort(m.views.begin(), m.views.end(), [](const ViewEntry& a, const ViewEntry& b) { return a.id < b.id; });

    // validate declared resolution against every listed image
    for (const auto& v : m.views) {
        RgbImage li = load_image(v.low_path);
        RgbImage ni = load_image(v.normal_path);
        if (m.width == 0) {
            m.width = li.width();
            m.height = li.height();
            require(m.width >= 8 && m.height >= 8, "images smaller than the 8x8 minimum");
        }
        if (li.width() != m.width || li.height() != m.height || ni.width() != m.width ||
            ni.height() != m.height)
            fail("view %s does not match scene resolution %dx%d", v.id.c_str(), m.width, m.height);
    }
    return m;
}

// 75% of views (rounded down) to preprocess_train at uniform index stride,
// remainder to reconstruction; half of that (12.5% of the total, rounded
// down) to test, again uniformly spaced. Pure function of the view count;
// the seed is accepted for interface stability and ignored by the uniform
// policy.
inline SplitSpec make_splits(const SceneManifest& manifest, const std::string& policy, std::uint64_t seed) {
    (void)seed;
    require(policy == "uniform", "unknown split policy '" + policy + "'");
    int n = static_cast<int>(manifest.views.size());
    if (n < 8)
        fail("need at least 8 views to split, got %d", n);
    int n_train = (n * 3) / 4;
    int n_test = n / 8;
    std::vector<bool> in_train(n, false);
    for (int i = 0; i < n_train; ++i)
        in_train[static_cast<std::size_t>(static_cast<long long>(i) * n / n_train)] = true;

    SplitSpec s;
    std::vector<std::string> recon;
    for (int i = 0; i < n; ++i) {
        if (in_train[i])
            s.preprocess_train.push_back(manifest.views[i].id);
        else
            recon.push_back(manifest.views[i].id);
    }
    s.reconstruction = recon;
    for (int j = 0; j < n_test; ++j)
        s.test.push_back(recon[static_cast<std::size_t>(static_cast<long long>(j) * recon.size() / n_test)]);
    return s;
}

// k views at uniform index stride over the sorted preprocess_train split.
inline std::vector<std::string> sample_fewshot(const SplitSpec& split, int k = 10) {
    int n = static_cast<int>(split.preprocess_train.size());
    if (k > n)
        fail("few-shot request k=%d exceeds preprocess_train size %d", k, n);
    require(k >= 1, "few-shot k must be >= 1");
    std::vector<std::string> out;
    for (int i = 0; i < k; ++i)
        out.push_back(split.preprocess_train[static_cast<std::size_t>(static_cast<long long>(i) * n / k)]);
    return out;
}

// ---------------------------------------------------------------------------
// manifest JSON (schema: scene, resolution [w,h], views[])
// ---------------------------------------------------------------------------

inline nlohmann::json manifest_to_json(const SceneManifest& m) {
    nlohmann::json j;
    j["scene"] = m.scene_name;
    j["resolution"] = {m.width, m.height};
    j["views"] = nlohmann::json::array();
    for (const auto& v : m.views) {
        auto q = rotmat_to_quat(v.camera.rotation);
        nlohmann::json jv;
        jv["id"] = v.id;
        jv["low"] = v.low_path;
        jv["normal"] = v.normal_path;
        jv["camera"] = {{"fx", v.camera.fx},
                        {"fy", v.camera.fy},
                        {"cx", v.camera.cx},
                        {"cy", v.camera.cy},
                        {"qvec", {q[0], q[1], q[2], q[3]}},
                        {"tvec", {v.camera.translation[0], v.camera.translation[1], v.camera.translation[2]}}};
        j["views"].push_back(jv);
    }
    return j;
}

inline SceneManifest manifest_from_json(const nlohmann::json& j) {
    SceneManifest m;
    m.scene_name = j.at("scene").get<std::string>();
    m.width = j.at("resolution").at(0).get<int>();
    m.height = j.at("resolution").at(1).get<int>();
    for (const auto& jv : j.at("views")) {
        ViewEntry v;
        v.id = jv.at("id").get<std::string>();
        v.low_path = jv.at("low").get<std::string>();
        v.normal_path = jv.at("normal").get<std::string>();
        const auto& jc = jv.at("camera");
        v.camera.fx = jc.at("fx").get<double>();
        v.camera.fy = jc.at("fy").get<double>();
        v.camera.cx = jc.at("cx").get<double>();
        v.camera.cy = jc.at("cy").get<double>();
        auto q = jc.at("qvec");
        v.camera.rotation = quat_to_rotmat(q.at(0), q.at(1), q.at(2), q.at(3));
        auto t = jc.at("tvec");
        v.camera.translation = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()};
        v.camera.width = m.width;
        v.camera.height = m.height;
        m.views.push_back(std::move(v));
    }
    return m;
}

inline void save_manifest_json(const std::string& path, const SceneManifest& m) {
    std::ofstream f(path);
    if (!f)
        fail("cannot write %s", path.c_str());
    f << manifest_to_json(m).dump(2) << "\n";
}

inline SceneManifest load_manifest_json(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        fail("cannot open %s", path.c_str());
    nlohmann::json j;
    f >> j;
    return manifest_from_json(j);
}

} // namespace merid

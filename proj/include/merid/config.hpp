// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "merid/common.hpp"
#include "merid/gsplat.hpp"
#include "merid/isfga.hpp"
#include "merid/reflection_head.hpp"
#include "merid/retinex.hpp"

namespace merid {

// INI-style key/value file: `[section]` headers, `key = value` lines, `#` or
// `;` comments. Keys are flattened to "section.key".
class IniFile {
public:
    static IniFile parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f)
            fail("cannot open config %s", path.c_str());
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }

    static IniFile parse(const std::string& text) {
        IniFile ini;
        std::istringstream ss(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(ss, line)) {
            ++lineno;
            std::string t = trim(line);
            if (t.empty() || t[0] == '#' || t[0] == ';')
                continue;
            if (t.front() == '[') {
                require(t.back() == ']', "malformed section header at line " + std::to_string(lineno));
                section = trim(t.substr(1, t.size() - 2));
                continue;
            }
            auto eq = t.find('=');
            require(eq != std::string::npos, "expected key = value at line " + std::to_string(lineno));
            std::string key = trim(t.substr(0, eq));
            std::string val = trim(t.substr(eq + 1));
            ini.values_[section.empty() ? key : section + "." + key] = val;
        }
        return ini;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }
    double get(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : std::stod(it->second);
    }
    long get(const std::string& key, long fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : std::stol(it->second);
    }
    int get(const std::string& key, int fallback) const { return static_cast<int>(get(key, static_cast<long>(fallback))); }
    bool get(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end())
            return fallback;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on")
            return true;
        if (v == "false" || v == "0" || v == "no" || v == "off")
            return false;
        fail("boolean config value expected for %s, got '%s'", key.c_str(), v.c_str());
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        std::size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos)
            return "";
        std::size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }
    std::map<std::string, std::string> values_;
};

struct TrainConfig {
    int iters = 400;
    double lr = 1e-3;
    double dssim_weight = 0.2; // base loss: L1 + w * (1 - SSIM)
    int val_every = 100;
    int crop = 0; // 0 trains on full frames; otherwise random square crops
};

struct GsplatStageConfig {
    int n_init = 400;
    OptimizeConfig optimize;
};

// Module toggles map one-to-one onto the ablation settings:
//   1 = baseline only, 2 = +ERID, 3 = +ERID+head, 4 = +ERID+IS-FGA, full = all
struct Toggles {
    bool erid = true;
    bool isfga = true;
    bool rf_head = true;

    static Toggles for_setting(const std::string& s) {
        if (s == "1")
            return {false, false, false};
        if (s == "2")
            return {true, false, false};
        if (s == "3")
            return {true, false, true};
        if (s == "4")
            return {true, true, false};
        if (s == "full")
            return {true, true, true};
        fail("unknown ablation setting '%s' (use 1..4 or full)", s.c_str());
    }
};

struct PipelineConfig {
    Toggles toggles;
    RetinexConfig retinex;
    IsfgaConfig isfga;
    HeadConfig head;
    TrainConfig train;
    AdaptConfig adapt;
    GsplatStageConfig gsplat;
    std::uint64_t seed = 0;
    std::string lpips_provider; // external command; empty disables the metric

    void sync_toggles() {
        isfga.use_isfga = toggles.isfga;
        isfga.use_decoupling = toggles.erid;
    }

    static PipelineConfig from_ini(const IniFile& ini) {
        PipelineConfig c;
        c.toggles.erid = ini.get("model.erid", true);
        c.toggles.isfga = ini.get("model.isfga", true);
        c.toggles.rf_head = ini.get("model.rf_head", true);
        c.seed = static_cast<std::uint64_t>(ini.get("model.seed", 0L));

        c.retinex.g_min = ini.get("retinex.g_min", 0.3);
        c.retinex.g_max = ini.get("retinex.g_max", 6.0);
        c.retinex.blur_radius = ini.get("retinex.blur_radius", 7);
        c.retinex.eps = ini.get("retinex.eps", 1e-4);
        c.retinex.f_hidden = ini.get("retinex.f_hidden", 16);
        c.retinex.state_channels = ini.get("retinex.state_channels", 16);
        c.retinex.state_hidden = ini.get("retinex.state_hidden", 16);

        c.isfga.scales = ini.get("isfga.scales", 3);
        c.isfga.widths.clear();
        {
            std::istringstream ws(ini.get("isfga.widths", std::string("32,64,128")));
            std::string tok;
            while (std::getline(ws, tok, ',')) c.isfga.widths.push_back(std::stoi(tok));
        }
        c.isfga.heads = ini.get("isfga.heads", 4);
        c.isfga.band_kernels.clear();
        {
            std::istringstream bs(ini.get("isfga.band_kernels", std::string("3,5,7")));
            std::string tok;
            while (std::getline(bs, tok, ',')) c.isfga.band_kernels.push_back(std::stoi(tok));
        }
        c.isfga.window = ini.get("isfga.window", 8);
        c.isfga.max_tokens = static_cast<std::size_t>(ini.get("isfga.max_tokens", 4096L));
        c.isfga.cond_dim = ini.get("isfga.cond_dim", 16);
        c.isfga.fb_hidden = ini.get("isfga.fb_hidden", 16);
        c.isfga.energy_full_scalar = ini.get("isfga.energy_full_scalar", false);

        c.head.hidden = ini.get("head.hidden", 16);

        c.train.iters = ini.get("train.iters", 400);
        c.train.lr = ini.get("train.lr", 1e-3);
        c.train.dssim_weight = ini.get("train.dssim_weight", 0.2);
        c.train.val_every = ini.get("train.val_every", 100);
        c.train.crop = ini.get("train.crop", 0);

        c.adapt.k_views = ini.get("adapt.views", 10);
        c.adapt.iters = ini.get("adapt.iters", 800);
        c.adapt.step_size = ini.get("adapt.step", 1e-3);

        c.gsplat.n_init = ini.get("gsplat.n_init", 400);
        c.gsplat.optimize.iters = ini.get("gsplat.iters", 2000);
        c.gsplat.optimize.lambda = ini.get("gsplat.lambda", 0.2);
        c.gsplat.optimize.densify = ini.get("gsplat.densify", true);
        c.gsplat.optimize.densify_interval = ini.get("gsplat.densify_interval", 200);
        c.gsplat.optimize.densify_grad_threshold = ini.get("gsplat.densify_grad_threshold", 0.02);
        c.gsplat.optimize.prune_opacity = ini.get("gsplat.prune_opacity", 0.01);

        c.lpips_provider = ini.get("eval.lpips_provider", std::string(""));
        c.sync_toggles();
        return c;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["toggles"] = {{"erid", toggles.erid}, {"isfga", toggles.isfga}, {"rf_head", toggles.rf_head}};
        j["seed"] = seed;
        j["retinex"] = {{"g_min", retinex.g_min},       {"g_max", retinex.g_max},
                        {"blur_radius", retinex.blur_radius}, {"eps", retinex.eps},
                        {"f_hidden", retinex.f_hidden}, {"state_channels", retinex.state_channels},
                        {"state_hidden", retinex.state_hidden}};
        j["isfga"] = {{"scales", isfga.scales},
                      {"widths", isfga.widths},
                      {"heads", isfga.heads},
                      {"band_kernels", isfga.band_kernels},
                      {"window", isfga.window},
                      {"max_tokens", isfga.max_tokens},
                      {"cond_dim", isfga.cond_dim},
                      {"fb_hidden", isfga.fb_hidden},
                      {"energy_full_scalar", isfga.energy_full_scalar}};
        j["head"] = {{"hidden", head.hidden}};
        j["train"] = {{"iters", train.iters},
                      {"lr", train.lr},
                      {"dssim_weight", train.dssim_weight},
                      {"val_every", train.val_every},
                      {"crop", train.crop}};
        j["adapt"] = {{"views", adapt.k_views}, {"iters", adapt.iters}, {"step", adapt.step_size}};
        j["gsplat"] = {{"n_init", gsplat.n_init},
                       {"iters", gsplat.optimize.iters},
                       {"lambda", gsplat.optimize.lambda},
                       {"densify", gsplat.optimize.densify},
                       {"densify_interval", gsplat.optimize.densify_interval},
                       {"densify_grad_threshold", gsplat.optimize.densify_grad_threshold},
                       {"prune_opacity", gsplat.optimize.prune_opacity}};
        j["lpips_provider"] = lpips_provider;
        return j;
    }

    static PipelineConfig from_json(const nlohmann::json& j) {
        PipelineConfig c;
        c.toggles.erid = j.at("toggles").at("erid").get<bool>();
        c.toggles.isfga = j.at("toggles").at("isfga").get<bool>();
        c.toggles.rf_head = j.at("toggles").at("rf_head").get<bool>();
        c.seed = j.at("seed").get<std::uint64_t>();
        const auto& r = j.at("retinex");
        c.retinex.g_min = r.at("g_min");
        c.retinex.g_max = r.at("g_max");
        c.retinex.blur_radius = r.at("blur_radius");
        c.retinex.eps = r.at("eps");
        c.retinex.f_hidden = r.at("f_hidden");
        c.retinex.state_channels = r.at("state_channels");
        c.retinex.state_hidden = r.at("state_hidden");
        const auto& i = j.at("isfga");
        c.isfga.scales = i.at("scales");
        c.isfga.widths = i.at("widths").get<std::vector<int>>();
        c.isfga.heads = i.at("heads");
        c.isfga.band_kernels = i.at("band_kernels").get<std::vector<int>>();
        c.isfga.window = i.at("window");
        c.isfga.max_tokens = i.at("max_tokens").get<std::size_t>();
        c.isfga.cond_dim = i.at("cond_dim");
        c.isfga.fb_hidden = i.at("fb_hidden");
        c.isfga.energy_full_scalar = i.at("energy_full_scalar");
        c.head.hidden = j.at("head").at("hidden");
        const auto& t = j.at("train");
        c.train.iters = t.at("iters");
        c.train.lr = t.at("lr");
        c.train.dssim_weight = t.at("dssim_weight");
        c.train.val_every = t.at("val_every");
        c.train.crop = t.at("crop");
        const auto& a = j.at("adapt");
        c.adapt.k_views = a.at("views");
        c.adapt.iters = a.at("iters");
        c.adapt.step_size = a.at("step");
        const auto& g = j.at("gsplat");
        c.gsplat.n_init = g.at("n_init");
        c.gsplat.optimize.iters = g.at("iters");
        c.gsplat.optimize.lambda = g.at("lambda");
        c.gsplat.optimize.densify = g.at("densify");
        c.gsplat.optimize.densify_interval = g.at("densify_interval");
        c.gsplat.optimize.densify_grad_threshold = g.at("densify_grad_threshold");
        c.gsplat.optimize.prune_opacity = g.at("prune_opacity");
        c.lpips_provider = j.at("lpips_provider").get<std::string>();
        c.sync_toggles();
        return c;
    }
};

} // namespace merid

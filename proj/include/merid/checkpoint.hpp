// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "merid/model.hpp"

namespace merid {

// Checkpoint file layout (binary, little-endian):
//   8 bytes magic "MERIDCKP", u32 format_version, u64 training step,
//   u32 config-JSON length + bytes,
//   u32 section count, then per section: name, parameter count and per
//   parameter its name, shape and raw f64 data.
// Doubles are stored bit-exact, so save -> load -> save is byte-identical.
namespace ckpt_detail {

inline constexpr char kMagic[8] = {'M', 'E', 'R', 'I', 'D', 'C', 'K', 'P'};
inline constexpr std::uint32_t kVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline std::string read_str(std::istream& is) {
    std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

inline void write_section(std::ostream& os, const std::string& name, const nn::ParamStore& ps) {
    write_str(os, name);
    write_u32(os, static_cast<std::uint32_t>(ps.names().size()));
    for (const auto& pname : ps.names()) {
        const Tensor& t = ps.get(pname)->val;
        write_str(os, pname);
        write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) write_u32(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * 8));
    }
}

} // namespace ckpt_detail

struct CheckpointData {
    std::uint32_t format_version = ckpt_detail::kVersion;
    std::uint64_t step = 0;
    nlohmann::json config;
    std::map<std::string, std::map<std::string, Tensor>> sections;
};

inline void save_checkpoint(const std::string& path, const MeridModel& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        fail("cannot write checkpoint %s", path.c_str());
    os.write(ckpt_detail::kMagic, 8);
    ckpt_detail::write_u32(os, ckpt_detail::kVersion);
    ckpt_detail::write_u64(os, static_cast<std::uint64_t>(model.step));
    ckpt_detail::write_str(os, model.config().to_json().dump());
    ckpt_detail::write_u32(os, 3);
    ckpt_detail::write_section(os, "retinex", model.retinex_params());
    ckpt_detail::write_section(os, "isfga", model.isfga_params());
    ckpt_detail::write_section(os, "head", model.head_params());
    require(static_cast<bool>(os), "checkpoint write failed: " + path);
}

inline CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        fail("cannot open checkpoint %s", path.c_str());
    char magic[8];
    is.read(magic, 8);
    require(is && std::memcmp(magic, ckpt_detail::kMagic, 8) == 0, "not a checkpoint file: " + path);
    CheckpointData data;
    data.format_version = ckpt_detail::read_u32(is);
    require(data.format_version == ckpt_detail::kVersion, "unsupported checkpoint version");
    data.step = ckpt_detail::read_u64(is);
    data.config = nlohmann::json::parse(ckpt_detail::read_str(is));
    std::uint32_t n_sections = ckpt_detail::read_u32(is);
    for (std::uint32_t s = 0; s < n_sections; ++s) {
        std::string sname = ckpt_detail::read_str(is);
        std::uint32_t n_params = ckpt_detail::read_u32(is);
        for (std::uint32_t p = 0; p < n_params; ++p) {
            std::string pname = ckpt_detail::read_str(is);
            std::uint32_t rank = ckpt_detail::read_u32(is);
            std::vector<int> shape(rank);
            for (auto& d : shape) d = static_cast<int>(ckpt_detail::read_u32(is));
            Tensor t(shape);
            is.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * 8));
            data.sections[sname][pname] = std::move(t);
        }
    }
    require(static_cast<bool>(is), "truncated checkpoint: " + path);
    return data;
}

// Rebuilds the model from the stored config snapshot, then loads every
// parameter bit-exactly.
inline MeridModel load_checkpoint(const std::string& path) {
    CheckpointData data = read_checkpoint(path);
    PipelineConfig cfg = PipelineConfig::from_json(data.config);
    MeridModel model(cfg);
    model.step = static_cast<long>(data.step);
    auto load_into = [&](const std::string& section, nn::ParamStore& ps) {
        auto it = data.sections.find(section);
        require(it != data.sections.end(), "checkpoint missing section " + section);
        for (const auto& name : ps.names()) {
            auto pit = it->second.find(name);
            require(pit != it->second.end(), "checkpoint missing parameter " + name);
            ps.load_value(name, pit->second);
        }
    };
    load_into("retinex", model.retinex_params());
    load_into("isfga", model.isfga_params());
    load_into("head", model.head_params());
    return model;
}

// Sidecar file holding just the adapted head (one base checkpoint can serve
// many scenes).
inline void save_head(const std::string& path, const MeridModel& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        fail("cannot write head file %s", path.c_str());
    os.write(ckpt_detail::kMagic, 8);
    ckpt_detail::write_u32(os, ckpt_detail::kVersion);
    ckpt_detail::write_u64(os, static_cast<std::uint64_t>(model.step));
    ckpt_detail::write_str(os, "{}");
    ckpt_detail::write_u32(os, 1);
    ckpt_detail::write_section(os, "head", model.head_params());
    require(static_cast<bool>(os), "head write failed: " + path);
}

inline void load_head(const std::string& path, MeridModel& model) {
    CheckpointData data = read_checkpoint(path);
    auto it = data.sections.find("head");
    require(it != data.sections.end(), "head file missing its section: " + path);
    for (const auto& name : model.head_params().names()) {
        auto pit = it->second.find(name);
        require(pit != it->second.end(), "head file missing parameter " + name);
        model.head_params().load_value(name, pit->second);
    }
}

} // namespace merid

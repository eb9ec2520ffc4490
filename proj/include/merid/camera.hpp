// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "merid/common.hpp"

namespace merid {

using Mat3 = std::array<double, 9>; // row-major
using Vec3 = std::array<double, 3>;

inline Vec3 mat3_mul_vec(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Vec3 mat3_tmul_vec(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2], m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
            m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

// Unit quaternion (w,x,y,z) to rotation matrix. The caller guarantees
// normalization; parse_colmap_text rejects norms off by more than 1e-3 and
// renormalizes the rest.
inline Mat3 quat_to_rotmat(double w, double x, double y, double z) {
    double n = std::sqrt(w * w + x * x + y * y + z * z);
    require(n > 0.0, "zero quaternion");
    w /= n;
    x /= n;
    y /= n;
    z /= n;
    return {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
            2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
}

// Shepperd's method; returns (w,x,y,z) with w >= 0.
inline std::array<double, 4> rotmat_to_quat(const Mat3& r) {
    double t = r[0] + r[4] + r[8];
    std::array<double, 4> q{};
    if (t > 0.0) {
        double s = std::sqrt(t + 1.0) * 2.0;
        q = {0.25 * s, (r[7] - r[5]) / s, (r[2] - r[6]) / s, (r[3] - r[1]) / s};
    } else if (r[0] > r[4] && r[0] > r[8]) {
        double s = std::sqrt(1.0 + r[0] - r[4] - r[8]) * 2.0;
        q = {(r[7] - r[5]) / s, 0.25 * s, (r[1] + r[3]) / s, (r[2] + r[6]) / s};
    } else if (r[4] > r[8]) {
        double s = std::sqrt(1.0 + r[4] - r[0] - r[8]) * 2.0;
        q = {(r[2] - r[6]) / s, (r[1] + r[3]) / s, 0.25 * s, (r[5] + r[7]) / s};
    } else {
        double s = std::sqrt(1.0 + r[8] - r[0] - r[4]) * 2.0;
        q = {(r[3] - r[1]) / s, (r[2] + r[6]) / s, (r[5] + r[7]) / s, 0.25 * s};
    }
    if (q[0] < 0.0)
        for (double& c : q) c = -c;
    double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    for (double& c : q) c /= n;
    return q;
}

// Pinhole camera with a world-to-camera rigid transform (x right, y down,
// z forward; COLMAP convention).
struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    Mat3 rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
    Vec3 translation{0, 0, 0};
    int width = 0, height = 0;

    void validate() const {
        require(fx > 0 && fy > 0, "camera: non-positive focal length");
        require(cx >= 0 && cx < width && cy >= 0 && cy < height, "camera: principal point outside image");
        // rotation^T rotation == I within 1e-6
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double dot = 0.0;
                for (int k = 0; k < 3; ++k) dot += rotation[k * 3 + i] * rotation[k * 3 + j];
                double expect = i == j ? 1.0 : 0.0;
                require(std::abs(dot - expect) <= 1e-6, "camera: rotation is not orthonormal");
            }
    }

    Vec3 world_to_cam(const Vec3& p) const {
        Vec3 r = mat3_mul_vec(rotation, p);
        return {r[0] + translation[0], r[1] + translation[1], r[2] + translation[2]};
    }

    Vec3 center() const {
        // camera center C = -R^T t
        Vec3 c = mat3_tmul_vec(rotation, translation);
        return {-c[0], -c[1], -c[2]};
    }
};

namespace colmap_detail {

inline bool content_line(const std::string& line) {
    for (char c : line) {
        if (c == '#')
            return false;
        if (!std::isspace(static_cast<unsigned char>(c)))
            return true;
    }
    return false;
}

} // namespace colmap_detail

// Parses COLMAP text exports (cameras.txt + images.txt). Supported camera
// models: PINHOLE and SIMPLE_PINHOLE (f maps to fx = fy = f). Returns a map
// from image name (as written in images.txt) to a validated Camera.
inline std::map<std::string, Camera> parse_colmap_text(const std::string& cameras_file,
                                                       const std::string& images_file) {
    std::ifstream cf(cameras_file);
    if (!cf)
        fail("cannot open %s", cameras_file.c_str());
    struct Intrinsics {
        double fx, fy, cx, cy;
        int w, h;
    };
    std::map<int, Intrinsics> cams;
    std::string line;
    while (std::getline(cf, line)) {
        if (!colmap_detail::content_line(line))
            continue;
        std::istringstream ss(line);
        int id, w, h;
        std::string model;
        ss >> id >> model >> w >> h;
        require(static_cast<bool>(ss), "malformed camera line: " + line);
        Intrinsics in{};
        in.w = w;
        in.h = h;
        if (model == "PINHOLE") {
            ss >> in.fx >> in.fy >> in.cx >> in.cy;
        } else if (model == "SIMPLE_PINHOLE") {
            double f;
            ss >> f >> in.cx >> in.cy;
            in.fx = in.fy = f;
        } else {
            fail("unsupported camera model '%s'", model.c_str());
        }
        require(static_cast<bool>(ss), "malformed camera params: " + line);
        cams[id] = in;
    }
    require(!cams.empty(), "no cameras in " + cameras_file);

    std::ifstream imf(images_file);
    if (!imf)
        fail("cannot open %s", images_file.c_str());
    std::map<std::string, Camera> out;
    bool expect_pose = true;
    while (std::getline(imf, line)) {
        if (!colmap_detail::content_line(line)) {
            if (!expect_pose && line.find_first_not_of(" \t\r\n") == std::string::npos)
                expect_pose = true; // empty POINTS2D line
            continue;
        }
        if (!expect_pose) {
            // POINTS2D line, ignored
            expect_pose = true;
            continue;
        }
        std::istringstream ss(line);
        long image_id;
        double qw, qx, qy, qz, tx, ty, tz;
        int cam_id;
        std::string name;
        ss >> image_id >> qw >> qx >> qy >> qz >> tx >> ty >> tz >> cam_id >> name;
        require(static_cast<bool>(ss), "malformed image line: " + line);
        double qn = std::sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
        if (std::abs(qn - 1.0) > 1e-3)
            fail("non-unit quaternion (norm %.6f) for image %s", qn, name.c_str());
        auto it = cams.find(cam_id);
        require(it != cams.end(), "image references unknown camera id");
        Camera c;
        c.fx = it->second.fx;
        c.fy = it->second.fy;
        c.cx = it->second.cx;
        c.cy = it->second.cy;
        c.width = it->second.w;
        c.height = it->second.h;
        c.rotation = quat_to_rotmat(qw, qx, qy, qz);
        c.translation = {tx, ty, tz};
        c.validate();
        out[name] = c;
        expect_pose = false;
    }
    require(!out.empty(), "no images in " + images_file);
    return out;
}

// Writes the matching COLMAP text files; one PINHOLE camera per image.
inline void write_colmap_text(const std::string& cameras_file, const std::string& images_file,
                              const std::vector<std::pair<std::string, Camera>>& views) {
    std::ofstream cf(cameras_file);
    if (!cf)
        fail("cannot write %s", cameras_file.c_str());
    cf << "# Camera list with one line of data per camera:\n";
    cf << "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n";
    cf.precision(17);
    for (std::size_t i = 0; i < views.size(); ++i) {
        const Camera& c = views[i].second;
        cf << (i + 1) << " PINHOLE " << c.width << " " << c.height << " " << c.fx << " " << c.fy << " " << c.cx
           << " " << c.cy << "\n";
    }
    std::ofstream imf(images_file);
    if (!imf)
        fail("cannot write %s", images_file.c_str());
    imf << "# Image list with two lines of data per image:\n";
    imf << "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n";
    imf << "#   POINTS2D[] as (X, Y, POINT3D_ID)\n";
    imf.precision(17);
    for (std::size_t i = 0; i < views.size(); ++i) {
        const Camera& c = views[i].second;
        auto q = rotmat_to_quat(c.rotation);
        imf << (i + 1) << " " << q[0] << " " << q[1] << " " << q[2] << " " << q[3] << " " << c.translation[0]
            << " " << c.translation[1] << " " << c.translation[2] << " " << (i + 1) << " " << views[i].first
            << "\n\n";
    }
}

} // namespace merid

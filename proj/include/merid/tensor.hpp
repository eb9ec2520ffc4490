// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

#include "merid/common.hpp"

namespace merid {

// Dense row-major tensor of doubles. Rank is dynamic; the networks use
// (C,H,W) for feature maps, (Cout,Cin,kh,kw) for conv weights, (n) for
// vectors and (m,n) for token matrices.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(count(shape), 0.0) {}
    Tensor(std::vector<int> s, double fill) : shape(std::move(s)), v(count(shape), fill) {}
    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        require(v.size() == count(shape), "tensor data size does not match shape");
    }

    static std::size_t count(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            require(d >= 0, "negative tensor dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double x) { return Tensor(std::move(s), x); }
    static Tensor scalar(double x) { return Tensor({1}, std::vector<double>{x}); }

    std::size_t numel() const { return v.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& at(std::size_t i) { return v[i]; }
    double at(std::size_t i) const { return v[i]; }

    // (C,H,W) accessors
    double& at3(int c, int y, int x) {
        return v[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    double at3(int c, int y, int x) const {
        return v[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    double min() const {
        double m = v.empty() ? 0.0 : v[0];
        for (double x : v) m = std::min(m, x);
        return m;
    }
    double max() const {
        double m = v.empty() ? 0.0 : v[0];
        for (double x : v) m = std::max(m, x);
        return m;
    }
    double sum() const {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    double mean() const { return v.empty() ? 0.0 : sum() / static_cast<double>(v.size()); }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

} // namespace merid

// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "merid/nn.hpp"
#include "merid/tensor.hpp"

namespace merid::testutil {

// Reference multi-head attention written as plain loops over the same
// projection weights ("<prefix>.wq/wk/wv/wout"); the independent oracle the
// gated block must reduce to when modulation and gating are disabled.
inline Tensor reference_mha(const nn::ParamStore& ps, const std::string& prefix, const Tensor& x, int heads) {
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    int n = H * W, d = C / heads;
    auto proj = [&](const char* name, const Tensor& in) {
        const Tensor& w = ps.get(prefix + "." + name + ".w")->val;
        const Tensor& b = ps.get(prefix + "." + name + ".b")->val;
        Tensor out({C, H, W});
        for (int co = 0; co < C; ++co)
            for (int p = 0; p < n; ++p) {
                double acc = b.v[static_cast<std::size_t>(co)];
                for (int ci = 0; ci < C; ++ci)
                    acc += w.v[(static_cast<std::size_t>(co) * C + ci)] * in.v[static_cast<std::size_t>(ci) * n + p];
                out.v[static_cast<std::size_t>(co) * n + p] = acc;
            }
        return out;
    };
    Tensor q = proj("wq", x), k = proj("wk", x), v = proj("wv", x);
    Tensor concat({C, H, W});
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < n; ++i) {
            std::vector<double> scores(static_cast<std::size_t>(n));
            double mx = -1e300;
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int dd = 0; dd < d; ++dd)
                    s += q.v[static_cast<std::size_t>(h * d + dd) * n + i] *
                         k.v[static_cast<std::size_t>(h * d + dd) * n + j];
                s /= std::sqrt(static_cast<double>(d));
                scores[static_cast<std::size_t>(j)] = s;
                mx = std::max(mx, s);
            }
            double Z = 0;
            for (double& s : scores) Z += (s = std::exp(s - mx));
            for (double& s : scores) s /= Z;
            for (int dd = 0; dd < d; ++dd) {
                double acc = 0;
                for (int j = 0; j < n; ++j)
                    acc += scores[static_cast<std::size_t>(j)] * v.v[static_cast<std::size_t>(h * d + dd) * n + j];
                concat.v[static_cast<std::size_t>(h * d + dd) * n + i] = acc;
            }
        }
    }
    const Tensor& wo = ps.get(prefix + ".wout.w")->val;
    const Tensor& bo = ps.get(prefix + ".wout.b")->val;
    Tensor out({C, H, W});
    for (int co = 0; co < C; ++co)
        for (int p = 0; p < n; ++p) {
            double acc = bo.v[static_cast<std::size_t>(co)];
            for (int ci = 0; ci < C; ++ci)
                acc += wo.v[(static_cast<std::size_t>(co) * C + ci)] * concat.v[static_cast<std::size_t>(ci) * n + p];
            out.v[static_cast<std::size_t>(co) * n + p] = acc;
        }
    return out;
}

} // namespace merid::testutil

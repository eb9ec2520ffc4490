// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "merid/autodiff.hpp"

namespace merid::testutil {

// Central finite differences against a freshly built graph. `make_loss` must
// construct the scalar loss from current parameter values on every call, so
// the numeric probe never reuses the recorded backward path it is checking.
struct GradCheckResult {
    double max_rel_error = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::string worst_param;
};

inline GradCheckResult check_gradients(const std::function<ad::Var()>& make_loss,
                                       const std::vector<std::pair<std::string, ad::Var>>& params,
                                       double step = 1e-5, double denom_floor = 1e-6) {
    ad::Var loss = make_loss();
    ad::backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params)
        analytic.push_back(p->has_grad() ? p->grad : Tensor::zeros(p->val.shape));

    auto eval = [&]() {
        ad::NoGrad ng;
        return make_loss()->val.v[0];
    };

    GradCheckResult res;
    for (std::size_t k = 0; k < params.size(); ++k) {
        ad::Var p = params[k].second;
        for (std::size_t i = 0; i < p->val.numel(); ++i) {
            double saved = p->val.v[i];
            p->val.v[i] = saved + step;
            double fp = eval();
            p->val.v[i] = saved - step;
            double fm = eval();
            p->val.v[i] = saved;
            double numeric = (fp - fm) / (2.0 * step);
            double an = analytic[k].v[i];
            double rel = std::abs(an - numeric) / std::max({std::abs(an), std::abs(numeric), denom_floor});
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_analytic = an;
                res.worst_numeric = numeric;
                res.worst_param = params[k].first;
            }
        }
    }
    return res;
}

} // namespace merid::testutil

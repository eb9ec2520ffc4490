// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "merid/autodiff.hpp"
#include "merid/rng.hpp"

namespace merid::nn {

// Named parameter registry. Modules allocate their weights here so training,
// checkpointing and freezing can treat a network as a flat list.
class ParamStore {
public:
    ad::Var add(const std::string& name, Tensor init) {
        require(by_name_.find(name) == by_name_.end(), "duplicate parameter: " + name);
        ad::Var v = ad::param(std::move(init));
        by_name_[name] = v;
        order_.push_back(name);
        return v;
    }

    ad::Var get(const std::string& name) const {
        auto it = by_name_.find(name);
        require(it != by_name_.end(), "unknown parameter: " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return by_name_.count(name) > 0; }

    const std::vector<std::string>& names() const { return order_; }

    std::vector<ad::Var> all() const {
        std::vector<ad::Var> out;
        out.reserve(order_.size());
        for (const auto& n : order_) out.push_back(by_name_.at(n));
        return out;
    }

    std::size_t count_scalars() const {
        std::size_t n = 0;
        for (const auto& [k, v] : by_name_) n += v->val.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [k, v] : by_name_) v->grad = Tensor();
    }

    void set_trainable(bool on) {
        for (auto& [k, v] : by_name_) v->requires_grad = on;
    }

    // Direct value access for serialization.
    void load_value(const std::string& name, const Tensor& t) {
        ad::Var v = get(name);
        require(v->val.same_shape(t), "parameter shape mismatch on load: " + name);
        v->val = t;
    }

private:
    std::map<std::string, ad::Var> by_name_;
    std::vector<std::string> order_;
};

inline Tensor he_normal(Rng& rng, std::vector<int> shape, int fan_in) {
    Tensor t(std::move(shape));
    double s = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& x : t.v) x = rng.normal() * s;
    return t;
}

inline Tensor xavier_uniform(Rng& rng, std::vector<int> shape, int fan_in, int fan_out) {
    Tensor t(std::move(shape));
    double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& x : t.v) x = rng.uniform(-a, a);
    return t;
}

// stride-1 same-size convolution layer
struct Conv2d {
    ad::Var w, b;

    static Conv2d create(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, Rng& rng,
                         bool zero_init = false) {
        Conv2d c;
        Tensor wt = zero_init ? Tensor::zeros({out_ch, in_ch, k, k})
                              : he_normal(rng, {out_ch, in_ch, k, k}, in_ch * k * k);
        c.w = ps.add(name + ".w", std::move(wt));
        c.b = ps.add(name + ".b", Tensor::zeros({out_ch}));
        return c;
    }

    ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, w, b); }
};

struct DepthwiseConv2d {
    ad::Var w;

    static DepthwiseConv2d create(ParamStore& ps, const std::string& name, int ch, int k, Rng& rng) {
        DepthwiseConv2d c;
        c.w = ps.add(name + ".w", he_normal(rng, {ch, k, k}, k * k));
        return c;
    }

    ad::Var operator()(const ad::Var& x) const { return ad::depthwise_conv2d(x, w); }
};

struct Dense {
    ad::Var w, b;

    static Dense create(ParamStore& ps, const std::string& name, int in_dim, int out_dim, Rng& rng,
                        bool zero_init = false) {
        Dense d;
        Tensor wt = zero_init ? Tensor::zeros({out_dim, in_dim}) : he_normal(rng, {out_dim, in_dim}, in_dim);
        d.w = ps.add(name + ".w", std::move(wt));
        d.b = ps.add(name + ".b", Tensor::zeros({out_dim}));
        return d;
    }

    ad::Var operator()(const ad::Var& x) const { return ad::dense(x, w, b); }
};

struct LayerNorm {
    ad::Var gamma, beta;

    static LayerNorm create(ParamStore& ps, const std::string& name, int ch) {
        LayerNorm ln;
        ln.gamma = ps.add(name + ".gamma", Tensor::full({ch}, 1.0));
        ln.beta = ps.add(name + ".beta", Tensor::zeros({ch}));
        return ln;
    }

    ad::Var operator()(const ad::Var& x) const { return ad::layer_norm_channels(x, gamma, beta); }
};

// Adam with optional cosine decay of the learning rate. Slots are keyed by
// node identity; parameters may come and go (e.g. per-scene heads).
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void step(const std::vector<ad::Var>& params) {
        ++t_;
        double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& p : params) {
            if (!p->has_grad())
                continue;
            Slot& s = slots_[p.get()];
            if (s.m.v.empty()) {
                s.m = Tensor::zeros(p->val.shape);
                s.v = Tensor::zeros(p->val.shape);
            }
            for (std::size_t i = 0; i < p->val.numel(); ++i) {
                double g = p->grad.v[i];
                s.m.v[i] = beta1_ * s.m.v[i] + (1.0 - beta1_) * g;
                s.v.v[i] = beta2_ * s.v.v[i] + (1.0 - beta2_) * g * g;
                double mhat = s.m.v[i] / c1;
                double vhat = s.v.v[i] / c2;
                p->val.v[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    struct Slot {
        Tensor m, v;
    };
    std::map<ad::Node*, Slot> slots_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

inline double cosine_lr(double base, long step, long total) {
    if (total <= 1)
        return base;
    double t = static_cast<double>(step) / static_cast<double>(total - 1);
    return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

} // namespace merid::nn

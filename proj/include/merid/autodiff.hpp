// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "merid/tensor.hpp"

namespace merid::ad {

// Reverse-mode automatic differentiation over Tensor values. Every operation
// allocates a fresh Node; a Node keeps shared ownership of its parents, so a
// forward pass run with gradients disabled frees intermediates eagerly and a
// recorded graph stays alive until backward() finishes.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad; // allocated lazily during backward
    bool requires_grad = false;
    std::uint64_t order = 0;
    std::vector<Var> parents;
    std::function<void(Node&)> backfn;

    bool has_grad() const { return !grad.v.empty(); }
    Tensor& ensure_grad() {
        if (grad.v.empty())
            grad = Tensor::zeros(val.shape);
        return grad;
    }
};

inline std::uint64_t next_order() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII scope that disables graph recording (inference / frozen evaluation).
struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGrad() { grad_mode() = prev; }
};

inline Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->order = next_order();
    return n;
}

inline Var param(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = true;
    n->order = next_order();
    return n;
}

inline Var scalar(double x) { return constant(Tensor::scalar(x)); }

namespace detail {

inline Var make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backfn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->order = next_order();
    bool need = false;
    if (grad_mode())
        for (const auto& p : parents)
            if (p->requires_grad) {
                need = true;
                break;
            }
    if (need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backfn = std::move(backfn);
    }
    return n;
}

inline std::size_t plane(const Tensor& t) {
    return static_cast<std::size_t>(t.dim(1)) * t.dim(2);
}

} // namespace detail

// Runs reverse accumulation from `root` (a scalar). Parameter gradients
// accumulate; call zero_grad between optimizer steps.
inline void backward(const Var& root) {
    require(root->val.numel() == 1, "backward: root must be scalar");
    if (!root->requires_grad)
        return;
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second)
            continue;
        topo.push_back(n);
        for (const auto& p : n->parents)
            stack.push_back(p.get());
    }
    std::sort(topo.begin(), topo.end(), [](Node* a, Node* b) { return a->order > b->order; });
    root->ensure_grad().v[0] = 1.0;
    for (Node* n : topo)
        if (n->backfn && n->has_grad())
            n->backfn(*n);
}

// ---------------------------------------------------------------------------
// element-wise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "add: shape mismatch");
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] += b->val.v[i];
    return detail::make(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "sub: shape mismatch");
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] -= b->val.v[i];
    return detail::make(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] -= self.grad.v[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "mul: shape mismatch");
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] *= b->val.v[i];
    return detail::make(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i] * b->val.v[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i] * a->val.v[i];
        }
    });
}

inline Var div(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "div: shape mismatch");
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] /= b->val.v[i];
    return detail::make(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i] / b->val.v[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i)
                g.v[i] -= self.grad.v[i] * self.val.v[i] / b->val.v[i];
        }
    });
}

inline Var mul_scalar(const Var& a, double s) {
    Tensor out = a->val;
    for (double& x : out.v) x *= s;
    return detail::make(std::move(out), {a}, [a, s](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i] * s;
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a->val;
    for (double& x : out.v) x += s;
    return detail::make(std::move(out), {a}, [a](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i];
    });
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }

inline Var exp_(const Var& a) {
    Tensor out = a->val;
    for (double& x : out.v) x = std::exp(x);
    return detail::make(std::move(out), {a}, [a](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i] * self.val.v[i];
    });
}

inline Var log_(const Var& a) {
    Tensor out = a->val;
    for (double& x : out.v) {
        require(x > 0.0, "log: non-positive input");
        x = std::log(x);
    }
    return detail::make(std::move(out), {a}, [a](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i] / a->val.v[i];
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a->val;
    for (double& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
    return detail::make(std::move(out), {a}, [a](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            double s = self.val.v[i];
            g.v[i] += self.grad.v[i] * s * (1.0 - s);
        }
    });
}

inline Var gelu(const Var& a) {
    // exact form, 0.5 x (1 + erf(x/sqrt(2)))
    Tensor out = a->val;
    for (double& x : out.v) x = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
    return detail::make(std::move(out), {a}, [a](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            double x = a->val.v[i];
            double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
            double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
            g.v[i] += self.grad.v[i] * (cdf + x * pdf);
        }
    });
}

inline Var abs_(const Var& a) {
    Tensor out = a->val;
    for (double& x : out.v) x = std::abs(x);
    return detail::make(std::move(out), {a}, [a](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            double x = a->val.v[i];
            double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            g.v[i] += self.grad.v[i] * s;
        }
    });
}

inline Var sqrt_(const Var& a) {
    Tensor out = a->val;
    for (double& x : out.v) {
        require(x >= 0.0, "sqrt: negative input");
        x = std::sqrt(x);
    }
    return detail::make(std::move(out), {a}, [a](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i)
            g.v[i] += self.grad.v[i] * 0.5 / std::max(self.val.v[i], 1e-300);
    });
}

// Clamp to [0,1] with a straight-through gradient: the gradient passes
// unchanged for inputs inside [-margin, 1+margin] so saturated pixels keep
// training, and is cut only well outside the box.
inline Var clamp01_st(const Var& a, double margin = 0.05) {
    Tensor out = a->val;
    for (double& x : out.v) x = std::clamp(x, 0.0, 1.0);
    return detail::make(std::move(out), {a}, [a, margin](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            double x = a->val.v[i];
            if (x >= -margin && x <= 1.0 + margin)
                g.v[i] += self.grad.v[i];
        }
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
    Tensor out = Tensor::scalar(a->val.sum());
    return detail::make(std::move(out), {a}, [a](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[0];
    });
}

inline Var mean_all(const Var& a) {
    double inv = 1.0 / static_cast<double>(a->val.numel());
    Tensor out = Tensor::scalar(a->val.sum() * inv);
    return detail::make(std::move(out), {a}, [a, inv](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[0] * inv;
    });
}

// (C,H,W) -> (C), mean over the spatial axes
inline Var spatial_mean(const Var& a) {
    require(a->val.rank() == 3, "spatial_mean: expects (C,H,W)");
    int C = a->val.dim(0);
    std::size_t hw = detail::plane(a->val);
    Tensor out({C});
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += a->val.v[c * hw + i];
        out.v[c] = s / static_cast<double>(hw);
    }
    return detail::make(std::move(out), {a}, [a, C, hw](Node& self) {
        Tensor& g = a->ensure_grad();
        double inv = 1.0 / static_cast<double>(hw);
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < hw; ++i) g.v[c * hw + i] += self.grad.v[c] * inv;
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, std::vector<int> shape) {
    require(Tensor::count(shape) == a->val.numel(), "reshape: element count mismatch");
    Tensor out(std::move(shape), a->val.v);
    return detail::make(std::move(out), {a}, [a](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[i];
    });
}

inline Var transpose2d(const Var& a) {
    require(a->val.rank() == 2, "transpose2d: expects matrix");
    int m = a->val.dim(0), n = a->val.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.v[static_cast<std::size_t>(j) * m + i] = a->val.v[static_cast<std::size_t>(i) * n + j];
    return detail::make(std::move(out), {a}, [a, m, n](Node& self) {
        Tensor& g = a->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                g.v[static_cast<std::size_t>(i) * n + j] += self.grad.v[static_cast<std::size_t>(j) * m + i];
    });
}

inline Var slice_channels(const Var& a, int c0, int count) {
    require(a->val.rank() == 3, "slice_channels: expects (C,H,W)");
    require(c0 >= 0 && c0 + count <= a->val.dim(0), "slice_channels: out of range");
    std::size_t hw = detail::plane(a->val);
    Tensor out({count, a->val.dim(1), a->val.dim(2)});
    std::copy_n(a->val.v.begin() + static_cast<std::ptrdiff_t>(c0 * hw), static_cast<std::size_t>(count) * hw, out.v.begin());
    return detail::make(std::move(out), {a}, [a, c0, count, hw](Node& self) {
        Tensor& g = a->ensure_grad();
        for (std::size_t i = 0; i < static_cast<std::size_t>(count) * hw; ++i)
            g.v[c0 * hw + i] += self.grad.v[i];
    });
}

inline Var concat_channels(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_channels: empty");
    int H = parts[0]->val.dim(1), W = parts[0]->val.dim(2);
    int C = 0;
    for (const auto& p : parts) {
        require(p->val.rank() == 3 && p->val.dim(1) == H && p->val.dim(2) == W,
                "concat_channels: spatial mismatch");
        C += p->val.dim(0);
    }
    Tensor out({C, H, W});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->val.v.begin(), p->val.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(off));
        off += p->val.numel();
    }
    return detail::make(std::move(out), parts, [parts](Node& self) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                for (std::size_t i = 0; i < g.numel(); ++i) g.v[i] += self.grad.v[off + i];
            }
            off += p->val.numel();
        }
    });
}

inline Var concat_channels(const Var& a, const Var& b) { return concat_channels(std::vector<Var>{a, b}); }

inline Var slice_spatial(const Var& a, int y0, int x0, int h, int w) {
    require(a->val.rank() == 3, "slice_spatial: expects (C,H,W)");
    int C = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
    require(y0 >= 0 && x0 >= 0 && y0 + h <= H && x0 + w <= W, "slice_spatial: out of range");
    Tensor out({C, h, w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at3(c, y, x) = a->val.at3(c, y0 + y, x0 + x);
    return detail::make(std::move(out), {a}, [a, y0, x0, h, w](Node& self) {
        Tensor& g = a->ensure_grad();
        int C = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
        (void)H;
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    g.v[(static_cast<std::size_t>(c) * a->val.dim(1) + y0 + y) * W + x0 + x] +=
                        self.grad.at3(c, y, x);
    });
}

// Inverse of cutting a feature map into non-overlapping tiles: tiles are laid
// out row-major over the tile grid.
inline Var assemble_spatial(const std::vector<Var>& tiles, int tilesY, int tilesX) {
    require(static_cast<int>(tiles.size()) == tilesY * tilesX, "assemble_spatial: tile count");
    int C = tiles[0]->val.dim(0), th = tiles[0]->val.dim(1), tw = tiles[0]->val.dim(2);
    Tensor out({C, tilesY * th, tilesX * tw});
    for (int ty = 0; ty < tilesY; ++ty)
        for (int tx = 0; tx < tilesX; ++tx) {
            const Tensor& t = tiles[static_cast<std::size_t>(ty) * tilesX + tx]->val;
            require(t.dim(0) == C && t.dim(1) == th && t.dim(2) == tw, "assemble_spatial: tile shape");
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < th; ++y)
                    for (int x = 0; x < tw; ++x) out.at3(c, ty * th + y, tx * tw + x) = t.at3(c, y, x);
        }
    return detail::make(std::move(out), tiles, [tiles, tilesY, tilesX, C, th, tw](Node& self) {
        for (int ty = 0; ty < tilesY; ++ty)
            for (int tx = 0; tx < tilesX; ++tx) {
                const Var& t = tiles[static_cast<std::size_t>(ty) * tilesX + tx];
                if (!t->requires_grad)
                    continue;
                Tensor& g = t->ensure_grad();
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < th; ++y)
                        for (int x = 0; x < tw; ++x)
                            g.at3(c, y, x) += self.grad.at3(c, ty * th + y, tx * tw + x);
            }
    });
}

// Reflect padding (mirror without repeating the border sample).
inline Var pad_reflect(const Var& a, int top, int bottom, int left, int right) {
    require(a->val.rank() == 3, "pad_reflect: expects (C,H,W)");
    int C = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
    require(top < H && bottom < H && left < W && right < W, "pad_reflect: pad exceeds size");
    auto ref = [](int i, int n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i;
            if (i >= n) i = 2 * n - 2 - i;
        }
        return i;
    };
    Tensor out({C, H + top + bottom, W + left + right});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H + top + bottom; ++y) {
            int sy = ref(y - top, H);
            for (int x = 0; x < W + left + right; ++x)
                out.at3(c, y, x) = a->val.at3(c, sy, ref(x - left, W));
        }
    return detail::make(std::move(out), {a}, [a, top, left, C, H, W, ref, bottom, right](Node& self) {
        Tensor& g = a->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H + top + bottom; ++y) {
                int sy = ref(y - top, H);
                for (int x = 0; x < W + left + right; ++x)
                    g.at3(c, sy, ref(x - left, W)) += self.grad.at3(c, y, x);
            }
    });
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

inline Var avg_pool2(const Var& a) {
    require(a->val.rank() == 3, "avg_pool2: expects (C,H,W)");
    int C = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
    require(H % 2 == 0 && W % 2 == 0, "avg_pool2: odd spatial size");
    Tensor out({C, H / 2, W / 2});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H / 2; ++y)
            for (int x = 0; x < W / 2; ++x)
                out.at3(c, y, x) = 0.25 * (a->val.at3(c, 2 * y, 2 * x) + a->val.at3(c, 2 * y, 2 * x + 1) +
                                           a->val.at3(c, 2 * y + 1, 2 * x) + a->val.at3(c, 2 * y + 1, 2 * x + 1));
    return detail::make(std::move(out), {a}, [a, C, H, W](Node& self) {
        Tensor& g = a->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H / 2; ++y)
                for (int x = 0; x < W / 2; ++x) {
                    double q = 0.25 * self.grad.at3(c, y, x);
                    g.at3(c, 2 * y, 2 * x) += q;
                    g.at3(c, 2 * y, 2 * x + 1) += q;
                    g.at3(c, 2 * y + 1, 2 * x) += q;
                    g.at3(c, 2 * y + 1, 2 * x + 1) += q;
                }
    });
}

inline Var upsample2_nearest(const Var& a) {
    require(a->val.rank() == 3, "upsample2_nearest: expects (C,H,W)");
    int C = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
    Tensor out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
            for (int x = 0; x < 2 * W; ++x) out.at3(c, y, x) = a->val.at3(c, y / 2, x / 2);
    return detail::make(std::move(out), {a}, [a, C, H, W](Node& self) {
        Tensor& g = a->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int x = 0; x < 2 * W; ++x) g.at3(c, y / 2, x / 2) += self.grad.at3(c, y, x);
    });
}

// ---------------------------------------------------------------------------
// convolutions (stride 1, odd kernel, zero padding, same spatial size)
// ---------------------------------------------------------------------------

inline Var conv2d(const Var& x, const Var& w, const Var& b) {
    require(x->val.rank() == 3 && w->val.rank() == 4, "conv2d: bad ranks");
    int Cin = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    int Cout = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
    require(w->val.dim(1) == Cin, "conv2d: channel mismatch");
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel must be odd");
    require(kh <= H && kw <= W, "conv2d: kernel larger than feature map");
    bool has_bias = b && b->val.numel() > 0;
    if (has_bias)
        require(b->val.numel() == static_cast<std::size_t>(Cout), "conv2d: bias size");
    int ph = kh / 2, pw = kw / 2;
    Tensor out({Cout, H, W});
    const double* xv = x->val.v.data();
    const double* wv = w->val.v.data();
    std::size_t hw = static_cast<std::size_t>(H) * W;
#pragma omp parallel for schedule(static) if (Cout * hw > 16384)
    for (int co = 0; co < Cout; ++co) {
        double* o = out.v.data() + co * hw;
        double bias = has_bias ? b->val.v[co] : 0.0;
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                double acc = bias;
                for (int ci = 0; ci < Cin; ++ci) {
                    const double* xp = xv + ci * hw;
                    const double* wp = wv + ((static_cast<std::size_t>(co) * Cin + ci) * kh) * kw;
                    int dy0 = std::max(0, ph - y), dy1 = std::min(kh, H + ph - y);
                    int dx0 = std::max(0, pw - xx), dx1 = std::min(kw, W + pw - xx);
                    for (int dy = dy0; dy < dy1; ++dy) {
                        const double* row = xp + static_cast<std::size_t>(y + dy - ph) * W;
                        const double* wrow = wp + static_cast<std::size_t>(dy) * kw;
                        for (int dx = dx0; dx < dx1; ++dx) acc += wrow[dx] * row[xx + dx - pw];
                    }
                }
                o[static_cast<std::size_t>(y) * W + xx] = acc;
            }
    }
    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return detail::make(std::move(out), std::move(parents),
                        [x, w, b, has_bias, Cin, H, W, Cout, kh, kw, ph, pw, hw](Node& self) {
        const double* gv = self.grad.v.data();
        if (has_bias && b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (int co = 0; co < Cout; ++co) {
                double s = 0.0;
                for (std::size_t i = 0; i < hw; ++i) s += gv[co * hw + i];
                gb.v[co] += s;
            }
        }
        if (w->requires_grad) {
            Tensor& gw = w->ensure_grad();
#pragma omp parallel for schedule(static) if (Cout * hw > 16384)
            for (int co = 0; co < Cout; ++co) {
                const double* go = gv + co * hw;
                for (int ci = 0; ci < Cin; ++ci) {
                    const double* xp = x->val.v.data() + ci * hw;
                    double* wp = gw.v.data() + ((static_cast<std::size_t>(co) * Cin + ci) * kh) * kw;
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx) {
                            double acc = 0.0;
                            int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
                            int x0 = std::max(0, pw - dx), x1 = std::min(W, W + pw - dx);
                            for (int y = y0; y < y1; ++y) {
                                const double* grow = go + static_cast<std::size_t>(y) * W;
                                const double* xrow = xp + static_cast<std::size_t>(y + dy - ph) * W;
                                for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * xrow[xx + dx - pw];
                            }
                            wp[static_cast<std::size_t>(dy) * kw + dx] += acc;
                        }
                }
            }
        }
        if (x->requires_grad) {
            Tensor& gx = x->ensure_grad();
#pragma omp parallel for schedule(static) if (Cin * hw > 16384)
            for (int ci = 0; ci < Cin; ++ci) {
                double* gi = gx.v.data() + ci * hw;
                for (int co = 0; co < Cout; ++co) {
                    const double* go = gv + co * hw;
                    const double* wp = w->val.v.data() + ((static_cast<std::size_t>(co) * Cin + ci) * kh) * kw;
                    for (int y = 0; y < H; ++y)
                        for (int xx = 0; xx < W; ++xx) {
                            double acc = 0.0;
                            int dy0 = std::max(0, y - H + ph + 1), dy1 = std::min(kh, y + ph + 1);
                            for (int dy = dy0; dy < dy1; ++dy) {
                                const double* grow = go + static_cast<std::size_t>(y - dy + ph) * W;
                                const double* wrow = wp + static_cast<std::size_t>(dy) * kw;
                                int dx0 = std::max(0, xx - W + pw + 1), dx1 = std::min(kw, xx + pw + 1);
                                for (int dx = dx0; dx < dx1; ++dx) acc += wrow[dx] * grow[xx - dx + pw];
                            }
                            gi[static_cast<std::size_t>(y) * W + xx] += acc;
                        }
                }
            }
        }
    });
}

inline Var conv2d(const Var& x, const Var& w) { return conv2d(x, w, nullptr); }

// depthwise: w is (C,kh,kw), output channel c sees only input channel c
inline Var depthwise_conv2d(const Var& x, const Var& w) {
    require(x->val.rank() == 3 && w->val.rank() == 3, "depthwise_conv2d: bad ranks");
    int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    int kh = w->val.dim(1), kw = w->val.dim(2);
    require(w->val.dim(0) == C, "depthwise_conv2d: channel mismatch");
    require(kh % 2 == 1 && kw % 2 == 1, "depthwise_conv2d: kernel must be odd");
    require(kh <= H && kw <= W, "depthwise_conv2d: kernel larger than feature map");
    int ph = kh / 2, pw = kw / 2;
    std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor out({C, H, W});
#pragma omp parallel for schedule(static) if (C * hw > 16384)
    for (int c = 0; c < C; ++c) {
        const double* xp = x->val.v.data() + c * hw;
        const double* wp = w->val.v.data() + static_cast<std::size_t>(c) * kh * kw;
        double* o = out.v.data() + c * hw;
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                double acc = 0.0;
                int dy0 = std::max(0, ph - y), dy1 = std::min(kh, H + ph - y);
                int dx0 = std::max(0, pw - xx), dx1 = std::min(kw, W + pw - xx);
                for (int dy = dy0; dy < dy1; ++dy) {
                    const double* row = xp + static_cast<std::size_t>(y + dy - ph) * W;
                    const double* wrow = wp + static_cast<std::size_t>(dy) * kw;
                    for (int dx = dx0; dx < dx1; ++dx) acc += wrow[dx] * row[xx + dx - pw];
                }
                o[static_cast<std::size_t>(y) * W + xx] = acc;
            }
    }
    return detail::make(std::move(out), {x, w}, [x, w, C, H, W, kh, kw, ph, pw, hw](Node& self) {
        const double* gv = self.grad.v.data();
        if (w->requires_grad) {
            Tensor& gw = w->ensure_grad();
            for (int c = 0; c < C; ++c) {
                const double* go = gv + c * hw;
                const double* xp = x->val.v.data() + c * hw;
                double* wp = gw.v.data() + static_cast<std::size_t>(c) * kh * kw;
                for (int dy = 0; dy < kh; ++dy)
                    for (int dx = 0; dx < kw; ++dx) {
                        double acc = 0.0;
                        int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
                        int x0 = std::max(0, pw - dx), x1 = std::min(W, W + pw - dx);
                        for (int y = y0; y < y1; ++y)
                            for (int xx = x0; xx < x1; ++xx)
                                acc += go[static_cast<std::size_t>(y) * W + xx] *
                                       xp[static_cast<std::size_t>(y + dy - ph) * W + xx + dx - pw];
                        wp[static_cast<std::size_t>(dy) * kw + dx] += acc;
                    }
            }
        }
        if (x->requires_grad) {
            Tensor& gx = x->ensure_grad();
            for (int c = 0; c < C; ++c) {
                const double* go = gv + c * hw;
                const double* wp = w->val.v.data() + static_cast<std::size_t>(c) * kh * kw;
                double* gi = gx.v.data() + c * hw;
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        double acc = 0.0;
                        int dy0 = std::max(0, y - H + ph + 1), dy1 = std::min(kh, y + ph + 1);
                        for (int dy = dy0; dy < dy1; ++dy) {
                            int dx0 = std::max(0, xx - W + pw + 1), dx1 = std::min(kw, xx + pw + 1);
                            for (int dx = dx0; dx < dx1; ++dx)
                                acc += wp[static_cast<std::size_t>(dy) * kw + dx] *
                                       go[static_cast<std::size_t>(y - dy + ph) * W + xx - dx + pw];
                        }
                        gi[static_cast<std::size_t>(y) * W + xx] += acc;
                    }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    require(a->val.rank() == 2 && b->val.rank() == 2, "matmul: expects matrices");
    int m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
    require(b->val.dim(0) == k, "matmul: inner dimension mismatch");
    Tensor out({m, n});
    const double* av = a->val.v.data();
    const double* bv = b->val.v.data();
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * n * k > 65536)
    for (int i = 0; i < m; ++i) {
        double* orow = out.v.data() + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double aip = av[static_cast<std::size_t>(i) * k + p];
            const double* brow = bv + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return detail::make(std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
        const double* gv = self.grad.v.data();
        if (a->requires_grad) {
            Tensor& ga = a->ensure_grad();
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * n * k > 65536)
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* grow = gv + static_cast<std::size_t>(i) * n;
                    const double* brow = b->val.v.data() + static_cast<std::size_t>(p) * n;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga.v[static_cast<std::size_t>(i) * k + p] += acc;
                }
        }
        if (b->requires_grad) {
            Tensor& gb = b->ensure_grad();
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * n * k > 65536)
            for (int p = 0; p < k; ++p)
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i)
                        acc += a->val.v[static_cast<std::size_t>(i) * k + p] * gv[static_cast<std::size_t>(i) * n + j];
                    gb.v[static_cast<std::size_t>(p) * n + j] += acc;
                }
        }
    });
}

// rows of a (m,n) matrix become probability distributions
inline Var softmax_rows(const Var& a) {
    require(a->val.rank() == 2, "softmax_rows: expects matrix");
    int m = a->val.dim(0), n = a->val.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* row = a->val.v.data() + static_cast<std::size_t>(i) * n;
        double* orow = out.v.data() + static_cast<std::size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += (orow[j] = std::exp(row[j] - mx));
        double inv = 1.0 / s;
        for (int j = 0; j < n; ++j) orow[j] *= inv;
    }
    return detail::make(std::move(out), {a}, [a, m, n](Node& self) {
        Tensor& g = a->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double* y = self.val.v.data() + static_cast<std::size_t>(i) * n;
            const double* gy = self.grad.v.data() + static_cast<std::size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
            double* gx = g.v.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
        }
    });
}

// dense layer on a vector: y = W x + b, W is (m,n), x is (n)
inline Var dense(const Var& x, const Var& w, const Var& b) {
    require(x->val.rank() == 1 && w->val.rank() == 2, "dense: bad ranks");
    int n = x->val.dim(0), m = w->val.dim(0);
    require(w->val.dim(1) == n, "dense: size mismatch");
    bool has_bias = b && b->val.numel() > 0;
    if (has_bias)
        require(b->val.numel() == static_cast<std::size_t>(m), "dense: bias size");
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
        double acc = has_bias ? b->val.v[i] : 0.0;
        const double* wr = w->val.v.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) acc += wr[j] * x->val.v[j];
        out.v[i] = acc;
    }
    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return detail::make(std::move(out), std::move(parents), [x, w, b, has_bias, m, n](Node& self) {
        if (has_bias && b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (int i = 0; i < m; ++i) gb.v[i] += self.grad.v[i];
        }
        if (w->requires_grad) {
            Tensor& gw = w->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gw.v[static_cast<std::size_t>(i) * n + j] += self.grad.v[i] * x->val.v[j];
        }
        if (x->requires_grad) {
            Tensor& gx = x->ensure_grad();
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int i = 0; i < m; ++i) acc += w->val.v[static_cast<std::size_t>(i) * n + j] * self.grad.v[i];
                gx.v[j] += acc;
            }
        }
    });
}

inline Var concat_vec(const Var& a, const Var& b) {
    require(a->val.rank() == 1 && b->val.rank() == 1, "concat_vec: expects vectors");
    int na = a->val.dim(0), nb = b->val.dim(0);
    Tensor out({na + nb});
    std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
    std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + na);
    return detail::make(std::move(out), {a, b}, [a, b, na, nb](Node& self) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (int i = 0; i < na; ++i) g.v[i] += self.grad.v[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (int i = 0; i < nb; ++i) g.v[i] += self.grad.v[na + i];
        }
    });
}

// per-channel scale of a feature map by a vector: y[c,:,:] = s[c] * x[c,:,:]
inline Var scale_channels(const Var& x, const Var& s) {
    require(x->val.rank() == 3 && s->val.rank() == 1, "scale_channels: bad ranks");
    int C = x->val.dim(0);
    require(s->val.dim(0) == C, "scale_channels: size mismatch");
    std::size_t hw = detail::plane(x->val);
    Tensor out = x->val;
    for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < hw; ++i) out.v[c * hw + i] *= s->val.v[c];
    return detail::make(std::move(out), {x, s}, [x, s, C, hw](Node& self) {
        if (x->requires_grad) {
            Tensor& g = x->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (std::size_t i = 0; i < hw; ++i) g.v[c * hw + i] += self.grad.v[c * hw + i] * s->val.v[c];
        }
        if (s->requires_grad) {
            Tensor& g = s->ensure_grad();
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t i = 0; i < hw; ++i) acc += self.grad.v[c * hw + i] * x->val.v[c * hw + i];
                g.v[c] += acc;
            }
        }
    });
}

// LayerNorm across channels at every pixel, with per-channel affine params.
inline Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6) {
    require(x->val.rank() == 3, "layer_norm_channels: expects (C,H,W)");
    int C = x->val.dim(0);
    std::size_t hw = detail::plane(x->val);
    require(gamma->val.numel() == static_cast<std::size_t>(C) && beta->val.numel() == static_cast<std::size_t>(C),
            "layer_norm_channels: affine size");
    Tensor out(x->val.shape);
    Tensor xhat(x->val.shape);
    Tensor rstd({static_cast<int>(hw)});
    for (std::size_t p = 0; p < hw; ++p) {
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += x->val.v[c * hw + p];
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            double d = x->val.v[c * hw + p] - mu;
            var += d * d;
        }
        var /= C;
        double r = 1.0 / std::sqrt(var + eps);
        rstd.v[p] = r;
        for (int c = 0; c < C; ++c) {
            double h = (x->val.v[c * hw + p] - mu) * r;
            xhat.v[c * hw + p] = h;
            out.v[c * hw + p] = gamma->val.v[c] * h + beta->val.v[c];
        }
    }
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto rs = std::make_shared<Tensor>(std::move(rstd));
    return detail::make(std::move(out), {x, gamma, beta}, [x, gamma, beta, xh, rs, C, hw](Node& self) {
        if (gamma->requires_grad) {
            Tensor& g = gamma->ensure_grad();
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t p = 0; p < hw; ++p) acc += self.grad.v[c * hw + p] * xh->v[c * hw + p];
                g.v[c] += acc;
            }
        }
        if (beta->requires_grad) {
            Tensor& g = beta->ensure_grad();
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t p = 0; p < hw; ++p) acc += self.grad.v[c * hw + p];
                g.v[c] += acc;
            }
        }
        if (x->requires_grad) {
            Tensor& g = x->ensure_grad();
            for (std::size_t p = 0; p < hw; ++p) {
                double mean_dh = 0.0, mean_dh_h = 0.0;
                for (int c = 0; c < C; ++c) {
                    double dh = self.grad.v[c * hw + p] * gamma->val.v[c];
                    mean_dh += dh;
                    mean_dh_h += dh * xh->v[c * hw + p];
                }
                mean_dh /= C;
                mean_dh_h /= C;
                for (int c = 0; c < C; ++c) {
                    double dh = self.grad.v[c * hw + p] * gamma->val.v[c];
                    g.v[c * hw + p] += rs->v[p] * (dh - mean_dh - xh->v[c * hw + p] * mean_dh_h);
                }
            }
        }
    });
}

} // namespace merid::ad

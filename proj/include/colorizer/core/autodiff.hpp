#ifndef COLORIZER_CORE_AUTODIFF_HPP
#define COLORIZER_CORE_AUTODIFF_HPP

#include "colorizer/core/parallel.hpp"
#include "colorizer/core/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

namespace colorizer {

namespace ad {

inline std::atomic<uint64_t>& op_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}

inline int& nograd_depth() {
    thread_local int depth = 0;
    return depth;
}

inline bool grad_enabled() { return nograd_depth() == 0; }

template <class S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    uint64_t order = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Tensor<S>& g) {
        if (grad.empty()) grad = Tensor<S>::zeros(value.shape());
        grad.array() += g.array();
    }
};

}  // namespace ad

/// Suppresses graph construction while alive (inference / frozen passes).
struct NoGradGuard {
    NoGradGuard() { ++ad::nograd_depth(); }
    ~NoGradGuard() { --ad::nograd_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Value-semantics handle to a node in the reverse-mode tape.
template <class S>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<S> v, bool requires_grad = false) : n_(std::make_shared<ad::Node<S>>()) {
        n_->value = std::move(v);
        n_->requires_grad = requires_grad && ad::grad_enabled();
        n_->order = ad::op_counter()++;
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor<S>& value() const { return n_->value; }
    Tensor<S>& value() { return n_->value; }
    const Tensor<S>& grad() const { return n_->grad; }
    Tensor<S>& grad() { return n_->grad; }
    bool requires_grad() const { return n_ && n_->requires_grad; }

    void zero_grad() {
        if (n_ && !n_->grad.empty()) n_->grad.array().setZero();
    }

    /// Reverse pass from this (scalar) node through the recorded graph.
    void backward() const {
        if (n_->value.size() != 1)
            throw std::invalid_argument("backward: root must be a scalar");
        std::vector<ad::Node<S>*> order;
        std::unordered_set<ad::Node<S>*> seen;
        std::vector<ad::Node<S>*> stack{n_.get()};
        seen.insert(n_.get());
        while (!stack.empty()) {
            ad::Node<S>* cur = stack.back();
            stack.pop_back();
            order.push_back(cur);
            for (auto& p : cur->parents) {
                if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const ad::Node<S>* a, const ad::Node<S>* b) { return a->order > b->order; });
        n_->accumulate(Tensor<S>::full({1}, S(1)));
        for (ad::Node<S>* node : order) {
            if (node->backward && !node->grad.empty()) node->backward(*node);
        }
    }

    std::shared_ptr<ad::Node<S>> node() const { return n_; }

    static Var from_node(std::shared_ptr<ad::Node<S>> n) {
        Var v;
        v.n_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<ad::Node<S>> n_;
};

/// Wrap a tensor as a constant (no gradient tracking).
template <class S>
Var<S> constant(Tensor<S> t) {
    return Var<S>(std::move(t), false);
}

namespace ad {

template <class S, class BackFn>
Var<S> make_op(Tensor<S> out, std::initializer_list<Var<S>> parents, BackFn&& fn) {
    bool track = grad_enabled();
    bool any = false;
    if (track)
        for (const auto& p : parents) any = any || p.requires_grad();
    auto node = std::make_shared<Node<S>>();
    node->value = std::move(out);
    node->order = op_counter()++;
    if (track && any) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::forward<BackFn>(fn);
    }
    return Var<S>::from_node(std::move(node));
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor<S> out(a.value().shape());
    out.array() = a.value().array() + b.value().array();
    auto an = a.node(), bn = b.node();
    return ad::make_op<S>(std::move(out), {a, b}, [an, bn](ad::Node<S>& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (bn->requires_grad) bn->accumulate(self.grad);
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor<S> out(a.value().shape());
    out.array() = a.value().array() - b.value().array();
    auto an = a.node(), bn = b.node();
    return ad::make_op<S>(std::move(out), {a, b}, [an, bn](ad::Node<S>& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (bn->requires_grad) {
            Tensor<S> g(self.grad.shape());
            g.array() = -self.grad.array();
            bn->accumulate(g);
        }
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor<S> out(a.value().shape());
    out.array() = a.value().array() * b.value().array();
    auto an = a.node(), bn = b.node();
    return ad::make_op<S>(std::move(out), {a, b}, [an, bn](ad::Node<S>& self) {
        if (an->requires_grad) {
            Tensor<S> g(self.grad.shape());
            g.array() = self.grad.array() * bn->value.array();
            an->accumulate(g);
        }
        if (bn->requires_grad) {
            Tensor<S> g(self.grad.shape());
            g.array() = self.grad.array() * an->value.array();
            bn->accumulate(g);
        }
    });
}

/// k*x + c elementwise with scalar constants.
template <class S>
Var<S> affine(const Var<S>& x, S k, S c) {
    Tensor<S> out(x.value().shape());
    out.array() = k * x.value().array() + c;
    auto xn = x.node();
    return ad::make_op<S>(std::move(out), {x}, [xn, k](ad::Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S> g(self.grad.shape());
        g.array() = self.grad.array() * k;
        xn->accumulate(g);
    });
}

template <class S>
Var<S> scale(const Var<S>& x, S k) {
    return affine(x, k, S(0));
}

template <class S>
Var<S> square(const Var<S>& x) {
    return mul(x, x);
}

template <class S>
Var<S> exp(const Var<S>& x) {
    Tensor<S> out(x.value().shape());
    out.array() = x.value().array().exp();
    auto xn = x.node();
    auto yv = out;  // keep a copy for the backward closure
    return ad::make_op<S>(std::move(out), {x}, [xn, yv](ad::Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S> g(self.grad.shape());
        g.array() = self.grad.array() * yv.array();
        xn->accumulate(g);
    });
}

template <class S>
Var<S> silu(const Var<S>& x) {
    Tensor<S> out(x.value().shape());
    out.array() = x.value().array() / (S(1) + (-x.value().array()).exp());
    auto xn = x.node();
    return ad::make_op<S>(std::move(out), {x}, [xn](ad::Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S> g(self.grad.shape());
        auto sig = (S(1) / (S(1) + (-xn->value.array()).exp())).eval();
        g.array() = self.grad.array() * (sig * (S(1) + xn->value.array() * (S(1) - sig)));
        xn->accumulate(g);
    });
}

template <class S>
Var<S> mean_all(const Var<S>& x) {
    Tensor<S> out = Tensor<S>::scalar(x.value().array().mean());
    auto xn = x.node();
    return ad::make_op<S>(std::move(out), {x}, [xn](ad::Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S> g(xn->value.shape());
        g.array().setConstant(self.grad[0] / static_cast<S>(xn->value.size()));
        xn->accumulate(g);
    });
}

template <class S>
Var<S> mse(const Var<S>& pred, const Var<S>& target) {
    return mean_all(square(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Structured ops on {B,C,H,W} / {N,M} tensors
// ---------------------------------------------------------------------------

/// y = x @ W^T + b with x {N,in}, W {out,in}, b {out} -> y {N,out}.
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& W, const Var<S>& b) {
    const auto& xs = x.value().shape();
    const auto& ws = W.value().shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        throw std::invalid_argument("linear: bad shapes");
    Eigen::Index N = xs[0], in = xs[1], out = ws[0];
    Tensor<S> y({N, out});
    y.as_matrix(N, out).noalias() = x.value().as_matrix(N, in) * W.value().as_matrix(out, in).transpose();
    y.as_matrix(N, out).rowwise() += b.value().as_matrix(1, out).row(0);
    auto xn = x.node(), wn = W.node(), bn = b.node();
    return ad::make_op<S>(std::move(y), {x, W, b}, [xn, wn, bn, N, in, out](ad::Node<S>& self) {
        auto dy = self.grad.as_matrix(N, out);
        if (xn->requires_grad) {
            Tensor<S> gx({N, in});
            gx.as_matrix(N, in).noalias() = dy * wn->value.as_matrix(out, in);
            xn->accumulate(gx);
        }
        if (wn->requires_grad) {
            Tensor<S> gw({out, in});
            gw.as_matrix(out, in).noalias() = dy.transpose() * xn->value.as_matrix(N, in);
            wn->accumulate(gw);
        }
        if (bn->requires_grad) {
            Tensor<S> gb({out});
            gb.as_matrix(1, out) = dy.colwise().sum();
            bn->accumulate(gb);
        }
    });
}

namespace ad {

/// Gather 3x3/1x1 patches of one image (C,H,W) into a (C*kh*kw, Ho*Wo) matrix.
template <class S>
void im2col(const S* x, Eigen::Index C, Eigen::Index H, Eigen::Index W, Eigen::Index kh,
            Eigen::Index kw, Eigen::Index stride, Eigen::Index pad, Eigen::Index Ho,
            Eigen::Index Wo, Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& cols) {
    cols.setZero(C * kh * kw, Ho * Wo);
    for (Eigen::Index c = 0; c < C; ++c) {
        const S* plane = x + c * H * W;
        for (Eigen::Index dy = 0; dy < kh; ++dy) {
            for (Eigen::Index dx = 0; dx < kw; ++dx) {
                Eigen::Index row = (c * kh + dy) * kw + dx;
                for (Eigen::Index oy = 0; oy < Ho; ++oy) {
                    Eigen::Index iy = oy * stride + dy - pad;
                    if (iy < 0 || iy >= H) continue;
                    S* dst = cols.data() + row + oy * Wo * cols.rows();
                    for (Eigen::Index ox = 0; ox < Wo; ++ox) {
                        Eigen::Index ix = ox * stride + dx - pad;
                        if (ix < 0 || ix >= W) continue;
                        // cols is column-major: element (row, oy*Wo+ox)
                        dst[ox * cols.rows()] = plane[iy * W + ix];
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the input image.
template <class S>
void col2im(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& cols, Eigen::Index C,
            Eigen::Index H, Eigen::Index W, Eigen::Index kh, Eigen::Index kw, Eigen::Index stride,
            Eigen::Index pad, Eigen::Index Ho, Eigen::Index Wo, S* dx) {
    for (Eigen::Index c = 0; c < C; ++c) {
        S* plane = dx + c * H * W;
        for (Eigen::Index dy = 0; dy < kh; ++dy) {
            for (Eigen::Index dx2 = 0; dx2 < kw; ++dx2) {
                Eigen::Index row = (c * kh + dy) * kw + dx2;
                for (Eigen::Index oy = 0; oy < Ho; ++oy) {
                    Eigen::Index iy = oy * stride + dy - pad;
                    if (iy < 0 || iy >= H) continue;
                    const S* src = cols.data() + row + oy * Wo * cols.rows();
                    for (Eigen::Index ox = 0; ox < Wo; ++ox) {
                        Eigen::Index ix = ox * stride + dx2 - pad;
                        if (ix < 0 || ix >= W) continue;
                        plane[iy * W + ix] += src[ox * cols.rows()];
                    }
                }
            }
        }
    }
}

}  // namespace ad

/// 2-D convolution over {B,C,H,W} with weight {Cout,Cin,kh,kw} and bias {Cout}.
/// Batch items run in parallel; weight gradients are reduced in batch order so
/// results do not depend on thread scheduling.
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& W, const Var<S>& b, Eigen::Index stride = 1,
              Eigen::Index pad = 0) {
    const auto& xs = x.value().shape();
    const auto& ws = W.value().shape();
    if (xs.size() != 4 || ws.size() != 4)
        throw std::invalid_argument("conv2d: expected {B,C,H,W} input and {O,I,kh,kw} weight");
    Eigen::Index B = xs[0], C = xs[1], H = xs[2], Wd = xs[3];
    Eigen::Index Cout = ws[0], kh = ws[2], kw = ws[3];
    if (ws[1] != C) throw std::invalid_argument("conv2d: channel mismatch");
    Eigen::Index Ho = (H + 2 * pad - kh) / stride + 1;
    Eigen::Index Wo = (Wd + 2 * pad - kw) / stride + 1;
    Tensor<S> y({B, Cout, Ho, Wo});

    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
    auto wmat = W.value().as_matrix(Cout, C * kh * kw);
    auto bias = b.value().as_matrix(1, Cout);
    parallel_for(B, [&](Eigen::Index bi) {
        Mat cols;
        ad::im2col(x.value().data() + bi * C * H * Wd, C, H, Wd, kh, kw, stride, pad, Ho, Wo, cols);
        typename Tensor<S>::MapRM yb(y.data() + bi * Cout * Ho * Wo, Cout, Ho * Wo);
        yb.noalias() = wmat * cols;
        yb.colwise() += bias.row(0).transpose();
    });

    auto xn = x.node(), wn = W.node(), bn = b.node();
    return ad::make_op<S>(std::move(y), {x, W, b},
                          [xn, wn, bn, B, C, H, Wd, Cout, kh, kw, stride, pad, Ho, Wo](ad::Node<S>& self) {
        using MatB = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
        Tensor<S> gx;
        if (xn->requires_grad) gx = Tensor<S>::zeros(xn->value.shape());
        std::vector<Tensor<S>> gw_items, gb_items;
        if (wn->requires_grad) gw_items.assign(static_cast<size_t>(B), Tensor<S>());
        if (bn->requires_grad) gb_items.assign(static_cast<size_t>(B), Tensor<S>());
        auto wmat = wn->value.as_matrix(Cout, C * kh * kw);
        parallel_for(B, [&](Eigen::Index bi) {
            typename Tensor<S>::ConstMapRM dy(self.grad.data() + bi * Cout * Ho * Wo, Cout, Ho * Wo);
            MatB cols;
            if (wn->requires_grad)
                ad::im2col(xn->value.data() + bi * C * H * Wd, C, H, Wd, kh, kw, stride, pad, Ho,
                           Wo, cols);
            if (wn->requires_grad) {
                Tensor<S> gw({Cout, C, kh, kw});
                gw.as_matrix(Cout, C * kh * kw).noalias() = dy * cols.transpose();
                gw_items[static_cast<size_t>(bi)] = std::move(gw);
            }
            if (bn->requires_grad) {
                Tensor<S> gb({Cout});
                gb.as_matrix(1, Cout) = dy.rowwise().sum().transpose();
                gb_items[static_cast<size_t>(bi)] = std::move(gb);
            }
            if (xn->requires_grad) {
                MatB dcols(C * kh * kw, Ho * Wo);
                dcols.noalias() = wmat.transpose() * dy;
                ad::col2im(dcols, C, H, Wd, kh, kw, stride, pad, Ho, Wo,
                           gx.data() + bi * C * H * Wd);
            }
        });
        if (xn->requires_grad) xn->accumulate(gx);
        if (wn->requires_grad) {
            Tensor<S> gw = Tensor<S>::zeros(wn->value.shape());
            for (auto& g : gw_items) gw.array() += g.array();
            wn->accumulate(gw);
        }
        if (bn->requires_grad) {
            Tensor<S> gb = Tensor<S>::zeros(bn->value.shape());
            for (auto& g : gb_items) gb.array() += g.array();
            bn->accumulate(gb);
        }
    });
}

/// GroupNorm over {B,C,H,W}: normalize each (item, group) slice, then apply
/// per-channel gamma/beta.
template <class S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, Eigen::Index groups,
                  S eps = S(1e-5)) {
    const auto& xs = x.value().shape();
    if (xs.size() != 4) throw std::invalid_argument("group_norm: expected {B,C,H,W}");
    Eigen::Index B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
    Eigen::Index gc = C / groups;      // channels per group
    Eigen::Index gsz = gc * H * W;     // elements per group

    Tensor<S> xhat(x.value().shape());
    Tensor<S> inv_std({B, groups});
    Tensor<S> y(x.value().shape());
    parallel_for(B, [&](Eigen::Index bi) {
        for (Eigen::Index g = 0; g < groups; ++g) {
            const S* src = x.value().data() + (bi * C + g * gc) * H * W;
            Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> slice(src, gsz);
            S mean = slice.mean();
            S var = (slice - mean).square().mean();
            S is = S(1) / std::sqrt(var + eps);
            inv_std(bi, g) = is;
            Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> xh(
                xhat.data() + (bi * C + g * gc) * H * W, gsz);
            xh = (slice - mean) * is;
        }
        for (Eigen::Index c = 0; c < C; ++c) {
            Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xh(
                xhat.data() + (bi * C + c) * H * W, H * W);
            Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> yo(y.data() + (bi * C + c) * H * W,
                                                              H * W);
            yo = xh * gamma.value()[c] + beta.value()[c];
        }
    });

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return ad::make_op<S>(std::move(y), {x, gamma, beta},
                          [xn, gn, bn, xhat, inv_std, B, C, H, W, groups, gc, gsz](ad::Node<S>& self) {
        std::vector<Tensor<S>> ggamma_items, gbeta_items;
        bool need_gb = gn->requires_grad || bn->requires_grad;
        if (need_gb) {
            ggamma_items.assign(static_cast<size_t>(B), Tensor<S>());
            gbeta_items.assign(static_cast<size_t>(B), Tensor<S>());
        }
        Tensor<S> gx;
        if (xn->requires_grad) gx = Tensor<S>::zeros(xn->value.shape());
        parallel_for(B, [&](Eigen::Index bi) {
            if (need_gb) {
                Tensor<S> gg = Tensor<S>::zeros({C});
                Tensor<S> gb = Tensor<S>::zeros({C});
                for (Eigen::Index c = 0; c < C; ++c) {
                    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> dy(
                        self.grad.data() + (bi * C + c) * H * W, H * W);
                    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xh(
                        xhat.data() + (bi * C + c) * H * W, H * W);
                    gg[c] = (dy * xh).sum();
                    gb[c] = dy.sum();
                }
                ggamma_items[static_cast<size_t>(bi)] = std::move(gg);
                gbeta_items[static_cast<size_t>(bi)] = std::move(gb);
            }
            if (!xn->requires_grad) return;
            for (Eigen::Index g = 0; g < groups; ++g) {
                // dyhat = dy * gamma (per channel within the group)
                Eigen::Array<S, Eigen::Dynamic, 1> dyhat(gsz);
                for (Eigen::Index cg = 0; cg < gc; ++cg) {
                    Eigen::Index c = g * gc + cg;
                    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> dy(
                        self.grad.data() + (bi * C + c) * H * W, H * W);
                    dyhat.segment(cg * H * W, H * W) = dy * gn->value[c];
                }
                Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xh(
                    xhat.data() + (bi * C + g * gc) * H * W, gsz);
                S m1 = dyhat.mean();
                S m2 = (dyhat * xh).mean();
                Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> gxs(
                    gx.data() + (bi * C + g * gc) * H * W, gsz);
                gxs = inv_std(bi, g) * (dyhat - m1 - xh * m2);
            }
        });
        if (xn->requires_grad) xn->accumulate(gx);
        if (gn->requires_grad) {
            Tensor<S> gg = Tensor<S>::zeros({C});
            for (auto& g : ggamma_items) gg.array() += g.array();
            gn->accumulate(gg);
        }
        if (bn->requires_grad) {
            Tensor<S> gb = Tensor<S>::zeros({C});
            for (auto& g : gbeta_items) gb.array() += g.array();
            bn->accumulate(gb);
        }
    });
}

/// x {B,C,H,W} + e {B,C} broadcast over spatial dims.
template <class S>
Var<S> add_channel_bias(const Var<S>& x, const Var<S>& e) {
    const auto& xs = x.value().shape();
    const auto& es = e.value().shape();
    if (xs.size() != 4 || es.size() != 2 || es[0] != xs[0] || es[1] != xs[1])
        throw std::invalid_argument("add_channel_bias: bad shapes");
    Eigen::Index B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    Tensor<S> y(x.value().shape());
    for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index c = 0; c < C; ++c) {
            Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> yo(y.data() + (b * C + c) * HW, HW);
            Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xi(
                x.value().data() + (b * C + c) * HW, HW);
            yo = xi + e.value()(b, c);
        }
    auto xn = x.node(), en = e.node();
    return ad::make_op<S>(std::move(y), {x, e}, [xn, en, B, C, HW](ad::Node<S>& self) {
        if (xn->requires_grad) xn->accumulate(self.grad);
        if (en->requires_grad) {
            Tensor<S> ge({B, C});
            for (Eigen::Index b = 0; b < B; ++b)
                for (Eigen::Index c = 0; c < C; ++c) {
                    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> dy(
                        self.grad.data() + (b * C + c) * HW, HW);
                    ge(b, c) = dy.sum();
                }
            en->accumulate(ge);
        }
    });
}

/// Nearest-neighbour 2x spatial upsample of {B,C,H,W}.
template <class S>
Var<S> upsample_nearest2x(const Var<S>& x) {
    const auto& xs = x.value().shape();
    if (xs.size() != 4) throw std::invalid_argument("upsample_nearest2x: expected {B,C,H,W}");
    Eigen::Index B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    Tensor<S> y({B, C, 2 * H, 2 * W});
    for (Eigen::Index bc = 0; bc < B * C; ++bc) {
        const S* src = x.value().data() + bc * H * W;
        S* dst = y.data() + bc * 4 * H * W;
        for (Eigen::Index iy = 0; iy < H; ++iy)
            for (Eigen::Index ix = 0; ix < W; ++ix) {
                S v = src[iy * W + ix];
                S* d = dst + (2 * iy) * 2 * W + 2 * ix;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
    }
    auto xn = x.node();
    return ad::make_op<S>(std::move(y), {x}, [xn, B, C, H, W](ad::Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S> gx(xn->value.shape());
        for (Eigen::Index bc = 0; bc < B * C; ++bc) {
            const S* dy = self.grad.data() + bc * 4 * H * W;
            S* g = gx.data() + bc * H * W;
            for (Eigen::Index iy = 0; iy < H; ++iy)
                for (Eigen::Index ix = 0; ix < W; ++ix) {
                    const S* d = dy + (2 * iy) * 2 * W + 2 * ix;
                    g[iy * W + ix] = d[0] + d[1] + d[2 * W] + d[2 * W + 1];
                }
        }
        xn->accumulate(gx);
    });
}

/// Concatenate along the channel axis of {B,C,H,W}.
template <class S>
Var<S> concat_channels(const Var<S>& a, const Var<S>& b) {
    const auto& as = a.value().shape();
    const auto& bs = b.value().shape();
    if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
        throw std::invalid_argument("concat_channels: shape mismatch");
    Eigen::Index B = as[0], Ca = as[1], Cb = bs[1], HW = as[2] * as[3];
    Tensor<S> y({B, Ca + Cb, as[2], as[3]});
    for (Eigen::Index bi = 0; bi < B; ++bi) {
        std::copy_n(a.value().data() + bi * Ca * HW, Ca * HW, y.data() + bi * (Ca + Cb) * HW);
        std::copy_n(b.value().data() + bi * Cb * HW, Cb * HW,
                    y.data() + bi * (Ca + Cb) * HW + Ca * HW);
    }
    auto an = a.node(), bn = b.node();
    return ad::make_op<S>(std::move(y), {a, b}, [an, bn, B, Ca, Cb, HW](ad::Node<S>& self) {
        if (an->requires_grad) {
            Tensor<S> ga(an->value.shape());
            for (Eigen::Index bi = 0; bi < B; ++bi)
                std::copy_n(self.grad.data() + bi * (Ca + Cb) * HW, Ca * HW,
                            ga.data() + bi * Ca * HW);
            an->accumulate(ga);
        }
        if (bn->requires_grad) {
            Tensor<S> gb(bn->value.shape());
            for (Eigen::Index bi = 0; bi < B; ++bi)
                std::copy_n(self.grad.data() + bi * (Ca + Cb) * HW + Ca * HW, Cb * HW,
                            gb.data() + bi * Cb * HW);
            bn->accumulate(gb);
        }
    });
}

/// Slice channels [c0,c1) of {B,C,H,W}.
template <class S>
Var<S> slice_channels(const Var<S>& x, Eigen::Index c0, Eigen::Index c1) {
    const auto& xs = x.value().shape();
    if (xs.size() != 4 || c0 < 0 || c1 > xs[1] || c0 >= c1)
        throw std::invalid_argument("slice_channels: bad range");
    Eigen::Index B = xs[0], C = xs[1], HW = xs[2] * xs[3], Cs = c1 - c0;
    Tensor<S> y({B, Cs, xs[2], xs[3]});
    for (Eigen::Index bi = 0; bi < B; ++bi)
        std::copy_n(x.value().data() + (bi * C + c0) * HW, Cs * HW, y.data() + bi * Cs * HW);
    auto xn = x.node();
    return ad::make_op<S>(std::move(y), {x}, [xn, B, C, HW, c0, Cs](ad::Node<S>& self) {
        if (!xn->requires_grad) return;
        Tensor<S> gx = Tensor<S>::zeros(xn->value.shape());
        for (Eigen::Index bi = 0; bi < B; ++bi)
            std::copy_n(self.grad.data() + bi * Cs * HW, Cs * HW,
                        gx.data() + (bi * C + c0) * HW);
        xn->accumulate(gx);
    });
}

/// Single-head cross-attention. x {B,C,H,W} provides queries (one per pixel),
/// ctx {B,L,D} provides keys/values. Returns {B,C,H,W} (no residual).
template <class S>
Var<S> cross_attention(const Var<S>& x, const Var<S>& ctx, const Var<S>& Wq, const Var<S>& bq,
                       const Var<S>& Wk, const Var<S>& bk, const Var<S>& Wv, const Var<S>& bv,
                       const Var<S>& Wo, const Var<S>& bo) {
    const auto& xs = x.value().shape();
    const auto& cs = ctx.value().shape();
    if (xs.size() != 4 || cs.size() != 3 || cs[0] != xs[0])
        throw std::invalid_argument("cross_attention: bad shapes");
    Eigen::Index B = xs[0], C = xs[1], HW = xs[2] * xs[3], L = cs[1], D = cs[2];
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
    S inv_sqrt = S(1) / std::sqrt(static_cast<S>(C));

    // Cached per-item intermediates for the backward pass.
    auto Qs = std::make_shared<std::vector<Mat>>(static_cast<size_t>(B));
    auto Ks = std::make_shared<std::vector<Mat>>(static_cast<size_t>(B));
    auto Vs = std::make_shared<std::vector<Mat>>(static_cast<size_t>(B));
    auto Ps = std::make_shared<std::vector<Mat>>(static_cast<size_t>(B));
    auto Os = std::make_shared<std::vector<Mat>>(static_cast<size_t>(B));

    Tensor<S> y(x.value().shape());
    auto wq = Wq.value().as_matrix(C, C), wo = Wo.value().as_matrix(C, C);
    auto wk = Wk.value().as_matrix(C, D), wv = Wv.value().as_matrix(C, D);
    auto vbq = bq.value().as_matrix(1, C), vbk = bk.value().as_matrix(1, C),
         vbv = bv.value().as_matrix(1, C), vbo = bo.value().as_matrix(1, C);
    parallel_for(B, [&](Eigen::Index bi) {
        // tokens: rows of T are pixels; x is stored (C,HW) so T = x_b^T
        typename Tensor<S>::ConstMapRM xb(x.value().data() + bi * C * HW, C, HW);
        typename Tensor<S>::ConstMapRM cb(ctx.value().data() + bi * L * D, L, D);
        Mat Q = (xb.transpose() * wq.transpose()).rowwise() + vbq.row(0);   // HW x C
        Mat K = (cb * wk.transpose()).rowwise() + vbk.row(0);               // L x C
        Mat V = (cb * wv.transpose()).rowwise() + vbv.row(0);               // L x C
        Mat Sc = Q * K.transpose() * inv_sqrt;                              // HW x L
        // row-wise softmax
        Mat P(Sc.rows(), Sc.cols());
        for (Eigen::Index r = 0; r < Sc.rows(); ++r) {
            auto row = Sc.row(r);
            S m = row.maxCoeff();
            Eigen::Array<S, 1, Eigen::Dynamic> e = (row.array() - m).exp();
            P.row(r) = e / e.sum();
        }
        Mat O = P * V;                                                      // HW x C
        Mat out = (O * wo.transpose()).rowwise() + vbo.row(0);              // HW x C
        typename Tensor<S>::MapRM yb(y.data() + bi * C * HW, C, HW);
        yb = out.transpose();
        (*Qs)[static_cast<size_t>(bi)] = std::move(Q);
        (*Ks)[static_cast<size_t>(bi)] = std::move(K);
        (*Vs)[static_cast<size_t>(bi)] = std::move(V);
        (*Ps)[static_cast<size_t>(bi)] = std::move(P);
        (*Os)[static_cast<size_t>(bi)] = std::move(O);
    });

    auto xn = x.node(), cn = ctx.node();
    auto wqn = Wq.node(), bqn = bq.node(), wkn = Wk.node(), bkn = bk.node(), wvn = Wv.node(),
         bvn = bv.node(), won = Wo.node(), bon = bo.node();
    return ad::make_op<S>(
        std::move(y), {x, ctx, Wq, bq, Wk, bk, Wv, bv, Wo, bo},
        [=](ad::Node<S>& self) {
            struct ItemGrads {
                Mat gwq, gwk, gwv, gwo;
                Eigen::Matrix<S, 1, Eigen::Dynamic> gbq, gbk, gbv, gbo;
            };
            std::vector<ItemGrads> ig(static_cast<size_t>(B));
            Tensor<S> gx, gctx;
            if (xn->requires_grad) gx = Tensor<S>::zeros(xn->value.shape());
            if (cn->requires_grad) gctx = Tensor<S>::zeros(cn->value.shape());
            auto wq = wqn->value.as_matrix(C, C), wo = won->value.as_matrix(C, C);
            auto wk = wkn->value.as_matrix(C, D), wv = wvn->value.as_matrix(C, D);
            parallel_for(B, [&](Eigen::Index bi) {
                auto& g = ig[static_cast<size_t>(bi)];
                typename Tensor<S>::ConstMapRM dyT(self.grad.data() + bi * C * HW, C, HW);
                Mat dOut = dyT.transpose();  // HW x C
                const Mat& Q = (*Qs)[static_cast<size_t>(bi)];
                const Mat& K = (*Ks)[static_cast<size_t>(bi)];
                const Mat& V = (*Vs)[static_cast<size_t>(bi)];
                const Mat& P = (*Ps)[static_cast<size_t>(bi)];
                const Mat& O = (*Os)[static_cast<size_t>(bi)];
                g.gwo = dOut.transpose() * O;
                g.gbo = dOut.colwise().sum();
                Mat dO = dOut * wo;          // HW x C
                Mat dP = dO * V.transpose(); // HW x L
                Mat dV = P.transpose() * dO; // L x C
                // softmax backward per row
                Mat dS(P.rows(), P.cols());
                for (Eigen::Index r = 0; r < P.rows(); ++r) {
                    S dot = (dP.row(r).array() * P.row(r).array()).sum();
                    dS.row(r) = P.row(r).array() * (dP.row(r).array() - dot);
                }
                dS *= inv_sqrt;
                Mat dQ = dS * K;             // HW x C
                Mat dK = dS.transpose() * Q; // L x C
                typename Tensor<S>::ConstMapRM xb(xn->value.data() + bi * C * HW, C, HW);
                typename Tensor<S>::ConstMapRM cb(cn->value.data() + bi * L * D, L, D);
                g.gwq = dQ.transpose() * xb.transpose();
                g.gbq = dQ.colwise().sum();
                g.gwk = dK.transpose() * cb;
                g.gbk = dK.colwise().sum();
                g.gwv = dV.transpose() * cb;
                g.gbv = dV.colwise().sum();
                if (xn->requires_grad) {
                    typename Tensor<S>::MapRM gxb(gx.data() + bi * C * HW, C, HW);
                    gxb = (dQ * wq).transpose();
                }
                if (cn->requires_grad) {
                    typename Tensor<S>::MapRM gcb(gctx.data() + bi * L * D, L, D);
                    gcb = dK * wk + dV * wv;
                }
            });
            if (xn->requires_grad) xn->accumulate(gx);
            if (cn->requires_grad) cn->accumulate(gctx);
            auto reduce = [&](ad::Node<S>* node, auto member_mat) {
                if (!node->requires_grad) return;
                Tensor<S> acc = Tensor<S>::zeros(node->value.shape());
                auto rows = node->value.shape()[0];
                auto cols = node->value.size() / rows;
                auto am = acc.as_matrix(rows, cols);
                for (auto& g : ig) am += member_mat(g);
                node->accumulate(acc);
            };
            reduce(wqn.get(), [](ItemGrads& g) -> Mat& { return g.gwq; });
            reduce(wkn.get(), [](ItemGrads& g) -> Mat& { return g.gwk; });
            reduce(wvn.get(), [](ItemGrads& g) -> Mat& { return g.gwv; });
            reduce(won.get(), [](ItemGrads& g) -> Mat& { return g.gwo; });
            auto reduce_bias = [&](ad::Node<S>* node, auto member_row) {
                if (!node->requires_grad) return;
                Tensor<S> acc = Tensor<S>::zeros(node->value.shape());
                auto am = acc.as_matrix(1, node->value.size());
                for (auto& g : ig) am += member_row(g);
                node->accumulate(acc);
            };
            reduce_bias(bqn.get(), [](ItemGrads& g) { return g.gbq; });
            reduce_bias(bkn.get(), [](ItemGrads& g) { return g.gbk; });
            reduce_bias(bvn.get(), [](ItemGrads& g) { return g.gbv; });
            reduce_bias(bon.get(), [](ItemGrads& g) { return g.gbo; });
        });
}

/// Rows of `table` {V,D} gathered per (item, position) id; items flagged null
/// take `null_vec` {D} instead. Returns {B,L,D}.
template <class S>
Var<S> build_context(const Var<S>& table, const Var<S>& null_vec,
                     const std::vector<std::vector<int>>& ids, const std::vector<char>& use_null) {
    const auto& ts = table.value().shape();
    if (ts.size() != 2 || null_vec.value().rank() != 1 || null_vec.value().dim(0) != ts[1])
        throw std::invalid_argument("build_context: bad table/null shapes");
    Eigen::Index B = static_cast<Eigen::Index>(ids.size());
    if (use_null.size() != ids.size())
        throw std::invalid_argument("build_context: flag count mismatch");
    Eigen::Index L = B > 0 ? static_cast<Eigen::Index>(ids[0].size()) : 0;
    Eigen::Index D = ts[1];
    Tensor<S> y({B, L, D});
    for (Eigen::Index b = 0; b < B; ++b) {
        if (static_cast<Eigen::Index>(ids[static_cast<size_t>(b)].size()) != L)
            throw std::invalid_argument("build_context: ragged id sequences");
        for (Eigen::Index l = 0; l < L; ++l) {
            const S* src;
            if (use_null[static_cast<size_t>(b)]) {
                src = null_vec.value().data();
            } else {
                int id = ids[static_cast<size_t>(b)][static_cast<size_t>(l)];
                if (id < 0 || id >= ts[0]) throw std::invalid_argument("build_context: id range");
                src = table.value().data() + id * D;
            }
            std::copy_n(src, D, y.data() + (b * L + l) * D);
        }
    }
    auto tn = table.node(), nn = null_vec.node();
    return ad::make_op<S>(std::move(y), {table, null_vec},
                          [tn, nn, ids, use_null, B, L, D](ad::Node<S>& self) {
        Tensor<S> gt, gn;
        if (tn->requires_grad) gt = Tensor<S>::zeros(tn->value.shape());
        if (nn->requires_grad) gn = Tensor<S>::zeros(nn->value.shape());
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index l = 0; l < L; ++l) {
                const S* dy = self.grad.data() + (b * L + l) * D;
                if (use_null[static_cast<size_t>(b)]) {
                    if (nn->requires_grad)
                        for (Eigen::Index d = 0; d < D; ++d) gn[d] += dy[d];
                } else if (tn->requires_grad) {
                    int id = ids[static_cast<size_t>(b)][static_cast<size_t>(l)];
                    S* dst = gt.data() + id * D;
                    for (Eigen::Index d = 0; d < D; ++d) dst[d] += dy[d];
                }
            }
        if (tn->requires_grad) tn->accumulate(gt);
        if (nn->requires_grad) nn->accumulate(gn);
    });
}

}  // namespace colorizer

#endif

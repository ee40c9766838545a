#ifndef COLORIZER_CORE_NN_HPP
#define COLORIZER_CORE_NN_HPP

#include "colorizer/core/autodiff.hpp"
#include "colorizer/core/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace colorizer {

template <class S>
struct ParamRef {
    std::string name;
    Var<S>* var;
};

template <class S>
using ParamList = std::vector<ParamRef<S>>;

template <class S>
Var<S> make_param(Tensor<S> t) {
    return Var<S>(std::move(t), true);
}

template <class S>
Var<S> kaiming_conv(Rng& rng, Eigen::Index out_c, Eigen::Index in_c, Eigen::Index k) {
    double std = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
    return make_param(rng.normal_tensor<S>({out_c, in_c, k, k}, std));
}

template <class S>
Var<S> kaiming_linear(Rng& rng, Eigen::Index out, Eigen::Index in) {
    double std = std::sqrt(2.0 / static_cast<double>(in));
    return make_param(rng.normal_tensor<S>({out, in}, std));
}

inline Eigen::Index norm_groups_for(Eigen::Index channels) {
    Eigen::Index g = 8;
    while (g > 1 && channels % g != 0) g /= 2;
    return g;
}

template <class S>
struct Conv2dLayer {
    Var<S> W, b;
    Eigen::Index stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(Rng& rng, Eigen::Index in_c, Eigen::Index out_c, Eigen::Index k,
                Eigen::Index stride_ = 1, Eigen::Index pad_ = 0)
        : W(kaiming_conv<S>(rng, out_c, in_c, k)),
          b(make_param(Tensor<S>::zeros({out_c}))),
          stride(stride_),
          pad(pad_) {}

    Var<S> forward(const Var<S>& x) const { return conv2d(x, W, b, stride, pad); }

    void collect(ParamList<S>& out, const std::string& prefix) {
        out.push_back({prefix + ".weight", &W});
        out.push_back({prefix + ".bias", &b});
    }
};

template <class S>
struct LinearLayer {
    Var<S> W, b;

    LinearLayer() = default;
    LinearLayer(Rng& rng, Eigen::Index in, Eigen::Index out)
        : W(kaiming_linear<S>(rng, out, in)), b(make_param(Tensor<S>::zeros({out}))) {}

    Var<S> forward(const Var<S>& x) const { return linear(x, W, b); }

    void collect(ParamList<S>& out, const std::string& prefix) {
        out.push_back({prefix + ".weight", &W});
        out.push_back({prefix + ".bias", &b});
    }
};

template <class S>
struct GroupNormLayer {
    Var<S> gamma, beta;
    Eigen::Index groups = 1;

    GroupNormLayer() = default;
    explicit GroupNormLayer(Eigen::Index channels)
        : gamma(make_param(Tensor<S>::full({channels}, S(1)))),
          beta(make_param(Tensor<S>::zeros({channels}))),
          groups(norm_groups_for(channels)) {}

    Var<S> forward(const Var<S>& x) const { return group_norm(x, gamma, beta, groups); }

    void collect(ParamList<S>& out, const std::string& prefix) {
        out.push_back({prefix + ".gamma", &gamma});
        out.push_back({prefix + ".beta", &beta});
    }
};

/// Sinusoidal timestep features for a batch of integer timesteps, {B,dim}.
template <class S>
Tensor<S> sinusoidal_embedding(const std::vector<int>& ts, Eigen::Index dim) {
    Eigen::Index half = dim / 2;
    Tensor<S> e({static_cast<Eigen::Index>(ts.size()), dim});
    for (size_t i = 0; i < ts.size(); ++i) {
        for (Eigen::Index j = 0; j < half; ++j) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) /
                                   static_cast<double>(half));
            double ang = static_cast<double>(ts[i]) * freq;
            e[static_cast<Eigen::Index>(i) * dim + j] = static_cast<S>(std::sin(ang));
            e[static_cast<Eigen::Index>(i) * dim + half + j] = static_cast<S>(std::cos(ang));
        }
    }
    return e;
}

/// Two-layer MLP over sinusoidal features.
template <class S>
struct TimeEmbed {
    Eigen::Index dim = 0;
    LinearLayer<S> fc1, fc2;

    TimeEmbed() = default;
    TimeEmbed(Rng& rng, Eigen::Index dim_) : dim(dim_), fc1(rng, dim_, dim_), fc2(rng, dim_, dim_) {}

    Var<S> forward(const std::vector<int>& ts) const {
        Var<S> e = constant(sinusoidal_embedding<S>(ts, dim));
        return fc2.forward(silu(fc1.forward(e)));
    }

    void collect(ParamList<S>& out, const std::string& prefix) {
        fc1.collect(out, prefix + ".fc1");
        fc2.collect(out, prefix + ".fc2");
    }
};

/// GroupNorm -> SiLU -> conv stack with an additive per-channel time bias and
/// an identity (or 1x1) shortcut.
template <class S>
struct ResBlock {
    GroupNormLayer<S> gn1, gn2;
    Conv2dLayer<S> conv1, conv2, shortcut;
    LinearLayer<S> temb_proj;
    bool has_shortcut = false;
    bool has_temb = false;

    ResBlock() = default;
    ResBlock(Rng& rng, Eigen::Index in_c, Eigen::Index out_c, Eigen::Index temb_dim)
        : gn1(in_c),
          gn2(out_c),
          conv1(rng, in_c, out_c, 3, 1, 1),
          conv2(rng, out_c, out_c, 3, 1, 1),
          has_shortcut(in_c != out_c),
          has_temb(temb_dim > 0) {
        if (has_shortcut) shortcut = Conv2dLayer<S>(rng, in_c, out_c, 1, 1, 0);
        if (has_temb) temb_proj = LinearLayer<S>(rng, temb_dim, out_c);
    }

    Var<S> forward(const Var<S>& x, const Var<S>& temb = {}) const {
        Var<S> h = conv1.forward(silu(gn1.forward(x)));
        if (has_temb) h = add_channel_bias(h, temb_proj.forward(silu(temb)));
        h = conv2.forward(silu(gn2.forward(h)));
        Var<S> sc = has_shortcut ? shortcut.forward(x) : x;
        return add(h, sc);
    }

    void collect(ParamList<S>& out, const std::string& prefix) {
        gn1.collect(out, prefix + ".gn1");
        conv1.collect(out, prefix + ".conv1");
        gn2.collect(out, prefix + ".gn2");
        conv2.collect(out, prefix + ".conv2");
        if (has_shortcut) shortcut.collect(out, prefix + ".shortcut");
        if (has_temb) temb_proj.collect(out, prefix + ".temb");
    }
};

/// Pre-norm single-head cross-attention with residual connection.
template <class S>
struct CrossAttnBlock {
    GroupNormLayer<S> norm;
    Var<S> Wq, bq, Wk, bk, Wv, bv, Wo, bo;

    CrossAttnBlock() = default;
    CrossAttnBlock(Rng& rng, Eigen::Index channels, Eigen::Index ctx_dim)
        : norm(channels),
          Wq(kaiming_linear<S>(rng, channels, channels)),
          bq(make_param(Tensor<S>::zeros({channels}))),
          Wk(kaiming_linear<S>(rng, channels, ctx_dim)),
          bk(make_param(Tensor<S>::zeros({channels}))),
          Wv(kaiming_linear<S>(rng, channels, ctx_dim)),
          bv(make_param(Tensor<S>::zeros({channels}))),
          Wo(kaiming_linear<S>(rng, channels, channels)),
          bo(make_param(Tensor<S>::zeros({channels}))) {}

    Var<S> forward(const Var<S>& x, const Var<S>& ctx) const {
        Var<S> h = cross_attention(norm.forward(x), ctx, Wq, bq, Wk, bk, Wv, bv, Wo, bo);
        return add(x, h);
    }

    void collect(ParamList<S>& out, const std::string& prefix) {
        norm.collect(out, prefix + ".norm");
        out.push_back({prefix + ".wq", &Wq});
        out.push_back({prefix + ".bq", &bq});
        out.push_back({prefix + ".wk", &Wk});
        out.push_back({prefix + ".bk", &bk});
        out.push_back({prefix + ".wv", &Wv});
        out.push_back({prefix + ".bv", &bv});
        out.push_back({prefix + ".wo", &Wo});
        out.push_back({prefix + ".bo", &bo});
    }
};

template <class S>
struct Downsample {
    Conv2dLayer<S> conv;
    Downsample() = default;
    Downsample(Rng& rng, Eigen::Index channels) : conv(rng, channels, channels, 3, 2, 1) {}
    Var<S> forward(const Var<S>& x) const { return conv.forward(x); }
    void collect(ParamList<S>& out, const std::string& prefix) { conv.collect(out, prefix); }
};

template <class S>
struct Upsample {
    Conv2dLayer<S> conv;
    Upsample() = default;
    Upsample(Rng& rng, Eigen::Index in_c, Eigen::Index out_c) : conv(rng, in_c, out_c, 3, 1, 1) {}
    Var<S> forward(const Var<S>& x) const { return conv.forward(upsample_nearest2x(x)); }
    void collect(ParamList<S>& out, const std::string& prefix) { conv.collect(out, prefix); }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <class S>
class Adam {
public:
    explicit Adam(ParamList<S> params, S lr, S beta1 = S(0.9), S beta2 = S(0.999),
                  S eps = S(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        slots_.resize(params_.size());
    }

    void zero_grad() {
        for (auto& p : params_) p.var->zero_grad();
    }

    void step() {
        ++t_;
        S bc1 = S(1) - std::pow(beta1_, static_cast<S>(t_));
        S bc2 = S(1) - std::pow(beta2_, static_cast<S>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Var<S>& p = *params_[i].var;
            if (p.grad().empty()) continue;
            Slot& s = slots_[i];
            if (s.m.empty()) {
                s.m = Tensor<S>::zeros(p.value().shape());
                s.v = Tensor<S>::zeros(p.value().shape());
            }
            const auto& g = p.grad().array();
            s.m.array() = beta1_ * s.m.array() + (S(1) - beta1_) * g;
            s.v.array() = beta2_ * s.v.array() + (S(1) - beta2_) * g.square();
            p.value().array() -=
                lr_ * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps_);
        }
    }

    void set_lr(S lr) { lr_ = lr; }
    int64_t steps_taken() const { return t_; }

private:
    struct Slot {
        Tensor<S> m, v;
    };
    ParamList<S> params_;
    std::vector<Slot> slots_;
    S lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

/// FNV-1a checksum over a parameter list, stable across runs on one platform.
template <class S>
uint64_t params_checksum(const ParamList<S>& params) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (const auto& p : params) {
        h = fnv1a64(p.name.data(), p.name.size(), h);
        h = fnv1a64(p.var->value().data(),
                    static_cast<size_t>(p.var->value().size()) * sizeof(S), h);
    }
    return h;
}

}  // namespace colorizer

#endif

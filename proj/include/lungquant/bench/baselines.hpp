#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lungquant/core/errors.hpp"
#include "lungquant/core/rng.hpp"
#include "lungquant/net/layers.hpp"
#include "lungquant/net/params.hpp"

namespace lungquant::bench {

using net::BnCache;
using net::ParamSet;

// Two-level encoder-decoder with skip connections; `width` is the first-stage
// channel count, doubling per level. Spatial dims must be divisible by 4.
struct UnetConfig {
    std::size_t in_channels = 1;
    std::size_t num_classes = 3;
    std::size_t width = 24;
    double leaky_slope = 0.01;
};

namespace detail {

// dimension traits: everything that differs between the 2D and 3D variants
template <class S>
struct Ops2d {
    static constexpr std::size_t kSpatialRank = 2;
    static std::vector<std::size_t> kernel_dims(std::size_t co, std::size_t ci,
                                                std::size_t k) {
        return {co, ci, k, k};
    }
    static Tensor<S> conv(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
        return net::conv2d_forward(x, w, b);
    }
    static Tensor<S> conv_bwd(const Tensor<S>& x, const Tensor<S>& w,
                              const Tensor<S>& dy, Tensor<S>& dw, Tensor<S>& db) {
        return net::conv2d_backward(x, w, dy, dw, db);
    }
    static Tensor<S> pool(const Tensor<S>& x, Tensor<std::uint32_t>& arg) {
        return net::maxpool2x2_forward(x, arg);
    }
    static Tensor<S> pool_bwd(const Tensor<std::uint32_t>& arg, const Tensor<S>& dy,
                              const std::vector<std::size_t>& in_dims) {
        return net::maxpool2x2_backward(arg, dy, in_dims[2], in_dims[3]);
    }
    static Tensor<S> up(const Tensor<S>& x) { return net::upsample2x_forward(x); }
    static Tensor<S> up_bwd(const Tensor<S>& dy) {
        return net::upsample2x_backward(dy);
    }
};

template <class S>
struct Ops3d {
    static constexpr std::size_t kSpatialRank = 3;
    static std::vector<std::size_t> kernel_dims(std::size_t co, std::size_t ci,
                                                std::size_t k) {
        return {co, ci, k, k, k};
    }
    static Tensor<S> conv(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
        return net::conv3d_forward(x, w, b);
    }
    static Tensor<S> conv_bwd(const Tensor<S>& x, const Tensor<S>& w,
                              const Tensor<S>& dy, Tensor<S>& dw, Tensor<S>& db) {
        return net::conv3d_backward(x, w, dy, dw, db);
    }
    static Tensor<S> pool(const Tensor<S>& x, Tensor<std::uint32_t>& arg) {
        return net::maxpool3d2_forward(x, arg);
    }
    static Tensor<S> pool_bwd(const Tensor<std::uint32_t>& arg, const Tensor<S>& dy,
                              const std::vector<std::size_t>& in_dims) {
        return net::maxpool3d2_backward(arg, dy, in_dims[2], in_dims[3], in_dims[4]);
    }
    static Tensor<S> up(const Tensor<S>& x) { return net::upsample3d2_forward(x); }
    static Tensor<S> up_bwd(const Tensor<S>& dy) {
        return net::upsample3d2_backward(dy);
    }
};

template <class S, class Ops>
void add_unet_params(ParamSet<S>& p, const UnetConfig& cfg) {
    const std::size_t w = cfg.width;
    auto stage = [&](const std::string& name, std::size_t c_in, std::size_t c_out) {
        p.add(name + ".conv1.weight", Ops::kernel_dims(c_out, c_in, 3));
        p.add(name + ".conv1.bias", {c_out});
        p.add(name + ".bn1.gamma", {c_out});
        p.add(name + ".bn1.beta", {c_out});
        p.add(name + ".bn1.mean", {c_out}, /*trainable=*/false);
        p.add(name + ".bn1.var", {c_out}, /*trainable=*/false);
        p.add(name + ".conv2.weight", Ops::kernel_dims(c_out, c_out, 3));
        p.add(name + ".conv2.bias", {c_out});
        p.add(name + ".bn2.gamma", {c_out});
        p.add(name + ".bn2.beta", {c_out});
        p.add(name + ".bn2.mean", {c_out}, /*trainable=*/false);
        p.add(name + ".bn2.var", {c_out}, /*trainable=*/false);
    };
    stage("enc1", cfg.in_channels, w);
    stage("enc2", w, 2 * w);
    stage("mid", 2 * w, 4 * w);
    stage("dec2", 4 * w + 2 * w, 2 * w);
    stage("dec1", 2 * w + w, w);
    p.add("out.weight", Ops::kernel_dims(cfg.num_classes, w, 1));
    p.add("out.bias", {cfg.num_classes});
}

template <class S>
void kaiming_init(ParamSet<S>& p, double leaky_slope, std::uint64_t seed) {
    Rng rng(seed);
    const double gain_sq = 2.0 / (1.0 + leaky_slope * leaky_slope);
    for (auto& e : p) {
        if (e.name.ends_with(".weight")) {
            std::size_t fan_in = 1;
            for (std::size_t d = 1; d < e.value.rank(); ++d) fan_in *= e.value.dim(d);
            const double sd = std::sqrt(gain_sq / double(fan_in));
            for (std::size_t i = 0; i < e.value.size(); ++i)
                e.value[i] = S(rng.normal(0.0, sd));
        } else if (e.name.ends_with(".gamma") || e.name.ends_with(".var")) {
            e.value.fill(S(1));
        }
    }
}

template <class S>
struct UnitTrace {
    Tensor<S> x;       // conv input
    BnCache<S> bn;
    Tensor<S> bn_out;  // pre-activation
};

template <class S>
struct StageTrace {
    UnitTrace<S> u1, u2;
};

template <class S, class Ops>
Tensor<S> unit_forward(ParamSet<S>& p, const std::string& conv,
                       const std::string& bn, const Tensor<S>& x, S slope,
                       bool train, UnitTrace<S>* t) {
    Tensor<S> c = Ops::conv(x, p.at(conv + ".weight"), p.at(conv + ".bias"));
    Tensor<S> b;
    if (train) {
        BnCache<S> cache;
        b = net::bn_forward_train(c, p.at(bn + ".gamma"), p.at(bn + ".beta"),
                                  p.at(bn + ".mean"), p.at(bn + ".var"), S(0.1),
                                  cache);
        if (t) {
            t->x = x;
            t->bn = std::move(cache);
            t->bn_out = b;
        }
    } else {
        b = net::bn_forward_eval(c, p.at(bn + ".gamma"), p.at(bn + ".beta"),
                                 p.at(bn + ".mean"), p.at(bn + ".var"));
    }
    return net::leaky_relu_forward(b, slope);
}

template <class S, class Ops>
Tensor<S> unit_backward(const ParamSet<S>& p, ParamSet<S>& g,
                        const std::string& conv, const std::string& bn,
                        const UnitTrace<S>& t, const Tensor<S>& dy, S slope) {
    Tensor<S> d_bn = net::leaky_relu_backward(t.bn_out, dy, slope);
    Tensor<S> d_conv = net::bn_backward(t.bn, p.at(bn + ".gamma"), d_bn,
                                        g.at(bn + ".gamma"), g.at(bn + ".beta"));
    return Ops::conv_bwd(t.x, p.at(conv + ".weight"), d_conv,
                         g.at(conv + ".weight"), g.at(conv + ".bias"));
}

template <class S, class Ops>
Tensor<S> stage_forward(ParamSet<S>& p, const std::string& name, const Tensor<S>& x,
                        S slope, bool train, StageTrace<S>* t) {
    Tensor<S> a = unit_forward<S, Ops>(p, name + ".conv1", name + ".bn1", x, slope,
                                       train, t ? &t->u1 : nullptr);
    return unit_forward<S, Ops>(p, name + ".conv2", name + ".bn2", a, slope, train,
                                t ? &t->u2 : nullptr);
}

template <class S, class Ops>
Tensor<S> stage_backward(const ParamSet<S>& p, ParamSet<S>& g,
                         const std::string& name, const StageTrace<S>& t,
                         const Tensor<S>& dy, S slope) {
    Tensor<S> da = unit_backward<S, Ops>(p, g, name + ".conv2", name + ".bn2", t.u2,
                                         dy, slope);
    return unit_backward<S, Ops>(p, g, name + ".conv1", name + ".bn1", t.u1, da,
                                 slope);
}

template <class S>
struct UnetTrace {
    StageTrace<S> enc1, enc2, mid, dec2, dec1;
    Tensor<S> e1, e2;                       // skip tensors
    Tensor<std::uint32_t> arg1, arg2;       // pool argmaxes
    std::vector<std::size_t> e1_dims, e2_dims;
    Tensor<S> d1;                           // input to the 1x1 head
};

template <class S, class Ops>
Tensor<S> unet_forward_impl(ParamSet<S>& p, const UnetConfig& cfg, const Tensor<S>& x,
                            bool train, UnetTrace<S>* t) {
    if (x.rank() != 2 + Ops::kSpatialRank || x.dim(1) != cfg.in_channels)
        throw DataError("unet input shape mismatch");
    for (std::size_t d = 2; d < x.rank(); ++d)
        if (x.dim(d) % 4 != 0)
            throw DataError("unet spatial dims must be divisible by 4");
    const S slope = S(cfg.leaky_slope);

    Tensor<S> e1 = stage_forward<S, Ops>(p, "enc1", x, slope, train,
                                         t ? &t->enc1 : nullptr);
    Tensor<std::uint32_t> arg1;
    Tensor<S> p1 = Ops::pool(e1, arg1);
    Tensor<S> e2 = stage_forward<S, Ops>(p, "enc2", p1, slope, train,
                                         t ? &t->enc2 : nullptr);
    Tensor<std::uint32_t> arg2;
    Tensor<S> p2 = Ops::pool(e2, arg2);
    Tensor<S> m = stage_forward<S, Ops>(p, "mid", p2, slope, train,
                                        t ? &t->mid : nullptr);

    Tensor<S> u2 = Ops::up(m);
    Tensor<S> c2 = net::concat_channels<S>({&u2, &e2});
    Tensor<S> d2 = stage_forward<S, Ops>(p, "dec2", c2, slope, train,
                                         t ? &t->dec2 : nullptr);
    Tensor<S> u1 = Ops::up(d2);
    Tensor<S> c1 = net::concat_channels<S>({&u1, &e1});
    Tensor<S> d1 = stage_forward<S, Ops>(p, "dec1", c1, slope, train,
                                         t ? &t->dec1 : nullptr);
    if (t) {
        t->e1_dims = e1.dims();
        t->e2_dims = e2.dims();
        t->e1 = std::move(e1);
        t->e2 = std::move(e2);
        t->arg1 = std::move(arg1);
        t->arg2 = std::move(arg2);
        t->d1 = d1;
    }
    return Ops::conv(d1, p.at("out.weight"), p.at("out.bias"));
}

template <class S, class Ops>
ParamSet<S> unet_backward_impl(const ParamSet<S>& p, const UnetConfig& cfg,
                               const UnetTrace<S>& t, const Tensor<S>& d_logits) {
    const S slope = S(cfg.leaky_slope);
    ParamSet<S> g = p.zeros_like();

    Tensor<S> dd1 = Ops::conv_bwd(t.d1, p.at("out.weight"), d_logits,
                                  g.at("out.weight"), g.at("out.bias"));
    Tensor<S> dc1 = stage_backward<S, Ops>(p, g, "dec1", t.dec1, dd1, slope);
    const std::size_t w1 = t.e1_dims[1];
    Tensor<S> du1 = net::slice_channels(dc1, 0, dc1.dim(1) - w1);
    Tensor<S> de1 = net::slice_channels(dc1, dc1.dim(1) - w1, w1);
    Tensor<S> dd2 = Ops::up_bwd(du1);

    Tensor<S> dc2 = stage_backward<S, Ops>(p, g, "dec2", t.dec2, dd2, slope);
    const std::size_t w2 = t.e2_dims[1];
    Tensor<S> du2 = net::slice_channels(dc2, 0, dc2.dim(1) - w2);
    Tensor<S> de2 = net::slice_channels(dc2, dc2.dim(1) - w2, w2);
    Tensor<S> dm = Ops::up_bwd(du2);

    Tensor<S> dp2 = stage_backward<S, Ops>(p, g, "mid", t.mid, dm, slope);
    Tensor<S> de2_pool = Ops::pool_bwd(t.arg2, dp2, t.e2_dims);
    for (std::size_t i = 0; i < de2.size(); ++i) de2.data()[i] += de2_pool.data()[i];

    Tensor<S> dp1 = stage_backward<S, Ops>(p, g, "enc2", t.enc2, de2, slope);
    Tensor<S> de1_pool = Ops::pool_bwd(t.arg1, dp1, t.e1_dims);
    for (std::size_t i = 0; i < de1.size(); ++i) de1.data()[i] += de1_pool.data()[i];

    stage_backward<S, Ops>(p, g, "enc1", t.enc1, de1, slope);
    return g;
}

}  // namespace detail

template <class S>
using Unet2dTrace = detail::UnetTrace<S>;
template <class S>
using Unet3dTrace = detail::UnetTrace<S>;

template <class S>
ParamSet<S> init_unet2d_params(const UnetConfig& cfg, std::uint64_t seed) {
    ParamSet<S> p;
    detail::add_unet_params<S, detail::Ops2d<S>>(p, cfg);
    detail::kaiming_init(p, cfg.leaky_slope, seed);
    return p;
}

template <class S>
ParamSet<S> init_unet3d_params(const UnetConfig& cfg, std::uint64_t seed) {
    ParamSet<S> p;
    detail::add_unet_params<S, detail::Ops3d<S>>(p, cfg);
    detail::kaiming_init(p, cfg.leaky_slope, seed);
    return p;
}

// x: (B, C, H, W) -> logits (B, num_classes, H, W)
template <class S>
Tensor<S> unet2d_forward(ParamSet<S>& params, const UnetConfig& cfg,
                         const Tensor<S>& x, bool train = false,
                         Unet2dTrace<S>* trace = nullptr) {
    return detail::unet_forward_impl<S, detail::Ops2d<S>>(params, cfg, x, train,
                                                          trace);
}

template <class S>
ParamSet<S> unet2d_backward(const ParamSet<S>& params, const UnetConfig& cfg,
                            const Unet2dTrace<S>& trace, const Tensor<S>& d_logits) {
    return detail::unet_backward_impl<S, detail::Ops2d<S>>(params, cfg, trace,
                                                           d_logits);
}

// x: (B, C, D, H, W) -> logits (B, num_classes, D, H, W)
template <class S>
Tensor<S> unet3d_forward(ParamSet<S>& params, const UnetConfig& cfg,
                         const Tensor<S>& x, bool train = false,
                         Unet3dTrace<S>* trace = nullptr) {
    return detail::unet_forward_impl<S, detail::Ops3d<S>>(params, cfg, x, train,
                                                          trace);
}

template <class S>
ParamSet<S> unet3d_backward(const ParamSet<S>& params, const UnetConfig& cfg,
                            const Unet3dTrace<S>& trace, const Tensor<S>& d_logits) {
    return detail::unet_backward_impl<S, detail::Ops3d<S>>(params, cfg, trace,
                                                           d_logits);
}

}  // namespace lungquant::bench

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "lungquant/core/rng.hpp"
#include "lungquant/net/convlstm.hpp"
#include "lungquant/net/layers.hpp"
#include "lungquant/net/params.hpp"

namespace lungquant::net {

struct NetworkConfig {
    std::size_t num_classes = 3;
    std::size_t in_channels = 1;
    std::size_t window_len = 11;   // context slices: (window_len-1)/2 each side
    std::size_t dense_layers = 4;
    std::size_t dense_growth = 16;
    std::size_t lstm_hidden = 32;
    std::size_t head_channels = 64;
    double leaky_slope = 0.01;

    std::size_t context_radius() const { return (window_len - 1) / 2; }
    std::size_t dense_out_channels() const {
        return in_channels + dense_layers * dense_growth;
    }
    void validate() const {
        if (window_len % 2 == 0 || window_len == 0)
            throw DataError("window_len must be odd");
        if (num_classes < 1 || in_channels < 1 || dense_layers < 1 ||
            dense_growth < 1 || lstm_hidden < 1 || head_channels < 1)
            throw DataError("all network widths must be at least 1");
    }
};

enum class Mode { kTrain, kEval };

template <class S>
struct ForwardOptions {
    Mode mode = Mode::kEval;
    std::optional<S> alpha_override;  // forces the fusion weight, test hook
};

template <class S>
struct ForwardResult {
    Tensor<S> s_main;  // (B, num_classes, H, W) logits
    Tensor<S> s_attn;  // (B, num_classes, H, W) logits
    Tensor<S> alpha;   // (B, 1, H, W) in (0,1)
    Tensor<S> s_out;   // s_main*alpha + s_attn*(1-alpha)
};

// ---- parameter construction -------------------------------------------------

namespace detail {

template <class S>
void add_conv(ParamSet<S>& p, const std::string& prefix, std::size_t c_out,
              std::size_t c_in, std::size_t k) {
    p.add(prefix + ".weight", {c_out, c_in, k, k});
    p.add(prefix + ".bias", {c_out});
}

template <class S>
void add_bn(ParamSet<S>& p, const std::string& prefix, std::size_t c) {
    p.add(prefix + ".gamma", {c});
    p.add(prefix + ".beta", {c});
    p.add(prefix + ".mean", {c}, /*trainable=*/false);
    p.add(prefix + ".var", {c}, /*trainable=*/false);
}

template <class S>
void add_head(ParamSet<S>& p, const std::string& prefix, std::size_t c_in,
              std::size_t c_mid, std::size_t c_out) {
    add_conv(p, prefix + ".conv1", c_mid, c_in, 3);
    add_bn(p, prefix + ".bn1", c_mid);
    add_conv(p, prefix + ".conv2", c_mid, c_mid, 3);
    add_bn(p, prefix + ".bn2", c_mid);
    add_conv(p, prefix + ".out", c_out, c_mid, 1);
}

}  // namespace detail

// Registers every tensor of the dual-branch model, zero-valued.
template <class S>
ParamSet<S> make_dual_params(const NetworkConfig& cfg) {
    cfg.validate();
    ParamSet<S> p;
    for (std::size_t i = 0; i < cfg.dense_layers; ++i) {
        const std::size_t c_in = cfg.in_channels + i * cfg.dense_growth;
        detail::add_bn(p, "dense.bn" + std::to_string(i), c_in);
        detail::add_conv(p, "dense.conv" + std::to_string(i), cfg.dense_growth, c_in, 3);
    }
    detail::add_conv(p, "stem", cfg.lstm_hidden, cfg.in_channels, 1);
    p.add("lstm.weight", {4 * cfg.lstm_hidden, 2 * cfg.lstm_hidden, 3, 3});
    p.add("lstm.bias", {4 * cfg.lstm_hidden});
    detail::add_head(p, "head_main", cfg.dense_out_channels(), cfg.head_channels,
                     cfg.num_classes);
    detail::add_head(p, "head_attn", cfg.lstm_hidden, cfg.head_channels,
                     cfg.num_classes);
    detail::add_head(p, "head_alpha", cfg.lstm_hidden, cfg.head_channels, 1);
    return p;
}

// Kaiming fan-in init for every conv kernel (LeakyReLU gain), zero biases,
// batch-norm scale 1 / shift 0 / running stats (0, 1).
template <class S>
ParamSet<S> init_dual_params(const NetworkConfig& cfg, std::uint64_t seed) {
    ParamSet<S> p = make_dual_params<S>(cfg);
    Rng rng(seed);
    const double gain_sq = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
    for (auto& e : p) {
        if (e.name.ends_with(".weight") && e.value.rank() == 4) {
            const std::size_t fan_in = e.value.dim(1) * e.value.dim(2) * e.value.dim(3);
            const double sd = std::sqrt(gain_sq / double(fan_in));
            for (std::size_t i = 0; i < e.value.size(); ++i)
                e.value[i] = S(rng.normal(0.0, sd));
        } else if (e.name.ends_with(".gamma") || e.name.ends_with(".var")) {
            e.value.fill(S(1));
        }
        // biases, beta, running means stay zero
    }
    return p;
}

// Replaces dense-block tensors with ones loaded from a weights file.
template <class S>
void load_pretrained_dense(ParamSet<S>& params, const std::filesystem::path& file) {
    ParamSet<S> loaded = load_params<S>(file);
    for (auto& e : params) {
        if (!e.name.starts_with("dense.")) continue;
        if (!loaded.has(e.name))
            throw DataError("pretrained file missing tensor " + e.name);
        const Tensor<S>& src = loaded.at(e.name);
        if (!src.same_shape(e.value))
            throw DataError("pretrained shape mismatch for " + e.name);
        e.value = src;
    }
}

// ---- heads -------------------------------------------------------------------

template <class S>
struct HeadTrace {
    Tensor<S> c1;  // conv1 output (bn1 input is implicit in bn cache)
    BnCache<S> bn1;
    Tensor<S> b1;  // bn1 output, leaky-relu input
    Tensor<S> a1;  // activation output, conv2 input
    Tensor<S> c2;
    BnCache<S> bn2;
    Tensor<S> b2;
    Tensor<S> a2;  // final 1x1 conv input
};

// block1(3x3 conv -> BN -> LeakyReLU) -> block2(same) -> 1x1 conv
template <class S>
Tensor<S> head_forward(const Tensor<S>& x, ParamSet<S>& p, const std::string& prefix,
                       const NetworkConfig& cfg, Mode mode, HeadTrace<S>* trace) {
    const S slope = S(cfg.leaky_slope);
    const S momentum = S(0.1);
    Tensor<S> c1 = conv2d_forward(x, p.at(prefix + ".conv1.weight"),
                                  p.at(prefix + ".conv1.bias"));
    Tensor<S> b1, a1, c2, b2, a2;
    BnCache<S> bn1, bn2;
    if (mode == Mode::kTrain)
        b1 = bn_forward_train(c1, p.at(prefix + ".bn1.gamma"), p.at(prefix + ".bn1.beta"),
                              p.at(prefix + ".bn1.mean"), p.at(prefix + ".bn1.var"),
                              momentum, bn1);
    else
        b1 = bn_forward_eval(c1, p.at(prefix + ".bn1.gamma"), p.at(prefix + ".bn1.beta"),
                             p.at(prefix + ".bn1.mean"), p.at(prefix + ".bn1.var"));
    a1 = leaky_relu_forward(b1, slope);
    c2 = conv2d_forward(a1, p.at(prefix + ".conv2.weight"), p.at(prefix + ".conv2.bias"));
    if (mode == Mode::kTrain)
        b2 = bn_forward_train(c2, p.at(prefix + ".bn2.gamma"), p.at(prefix + ".bn2.beta"),
                              p.at(prefix + ".bn2.mean"), p.at(prefix + ".bn2.var"),
                              momentum, bn2);
    else
        b2 = bn_forward_eval(c2, p.at(prefix + ".bn2.gamma"), p.at(prefix + ".bn2.beta"),
                             p.at(prefix + ".bn2.mean"), p.at(prefix + ".bn2.var"));
    a2 = leaky_relu_forward(b2, slope);
    Tensor<S> out = conv2d_forward(a2, p.at(prefix + ".out.weight"),
                                   p.at(prefix + ".out.bias"));
    out.check_finite((prefix + " output").c_str());
    if (trace) {
        trace->c1 = std::move(c1);
        trace->bn1 = std::move(bn1);
        trace->b1 = std::move(b1);
        trace->a1 = std::move(a1);
        trace->c2 = std::move(c2);
        trace->bn2 = std::move(bn2);
        trace->b2 = std::move(b2);
        trace->a2 = std::move(a2);
    }
    return out;
}

// returns d(head input); x is the same tensor the forward consumed
template <class S>
Tensor<S> head_backward(const Tensor<S>& x, const ParamSet<S>& p,
                        const std::string& prefix, const NetworkConfig& cfg,
                        const HeadTrace<S>& trace, const Tensor<S>& dy,
                        ParamSet<S>& grads) {
    const S slope = S(cfg.leaky_slope);
    Tensor<S> da2 = conv2d_backward(trace.a2, p.at(prefix + ".out.weight"), dy,
                                    grads.at(prefix + ".out.weight"),
                                    grads.at(prefix + ".out.bias"));
    Tensor<S> db2 = leaky_relu_backward(trace.b2, da2, slope);
    Tensor<S> dc2 = bn_backward(trace.bn2, p.at(prefix + ".bn2.gamma"), db2,
                                grads.at(prefix + ".bn2.gamma"),
                                grads.at(prefix + ".bn2.beta"));
    Tensor<S> da1 = conv2d_backward(trace.a1, p.at(prefix + ".conv2.weight"), dc2,
                                    grads.at(prefix + ".conv2.weight"),
                                    grads.at(prefix + ".conv2.bias"));
    Tensor<S> db1 = leaky_relu_backward(trace.b1, da1, slope);
    Tensor<S> dc1 = bn_backward(trace.bn1, p.at(prefix + ".bn1.gamma"), db1,
                                grads.at(prefix + ".bn1.gamma"),
                                grads.at(prefix + ".bn1.beta"));
    return conv2d_backward(x, p.at(prefix + ".conv1.weight"), dc1,
                           grads.at(prefix + ".conv1.weight"),
                           grads.at(prefix + ".conv1.bias"));
}

// ---- dense block -------------------------------------------------------------

template <class S>
struct DenseTrace {
    std::vector<Tensor<S>> feats;    // feats[0] = input, feats[i+1] = layer i output
    std::vector<BnCache<S>> bns;
    std::vector<Tensor<S>> bn_out;   // leaky-relu inputs
    std::vector<Tensor<S>> act;      // conv inputs
};

// each layer: BN -> LeakyReLU -> 3x3 conv over the concat of all earlier maps
template <class S>
Tensor<S> dense_forward(const Tensor<S>& x, ParamSet<S>& p, const NetworkConfig& cfg,
                        Mode mode, DenseTrace<S>* trace) {
    const S slope = S(cfg.leaky_slope);
    const S momentum = S(0.1);
    std::vector<Tensor<S>> feats;
    feats.push_back(x);
    if (trace) {
        trace->bns.resize(cfg.dense_layers);
        trace->bn_out.resize(cfg.dense_layers);
        trace->act.resize(cfg.dense_layers);
    }
    for (std::size_t i = 0; i < cfg.dense_layers; ++i) {
        const std::string bn = "dense.bn" + std::to_string(i);
        const std::string conv = "dense.conv" + std::to_string(i);
        std::vector<const Tensor<S>*> parts;
        for (const auto& f : feats) parts.push_back(&f);
        Tensor<S> cat = concat_channels(parts);
        Tensor<S> normed;
        BnCache<S> cache;
        if (mode == Mode::kTrain)
            normed = bn_forward_train(cat, p.at(bn + ".gamma"), p.at(bn + ".beta"),
                                      p.at(bn + ".mean"), p.at(bn + ".var"), momentum,
                                      cache);
        else
            normed = bn_forward_eval(cat, p.at(bn + ".gamma"), p.at(bn + ".beta"),
                                     p.at(bn + ".mean"), p.at(bn + ".var"));
        Tensor<S> activated = leaky_relu_forward(normed, slope);
        Tensor<S> out = conv2d_forward(activated, p.at(conv + ".weight"),
                                       p.at(conv + ".bias"));
        if (trace) {
            trace->bns[i] = std::move(cache);
            trace->bn_out[i] = std::move(normed);
            trace->act[i] = std::move(activated);
        }
        feats.push_back(std::move(out));
    }
    std::vector<const Tensor<S>*> parts;
    for (const auto& f : feats) parts.push_back(&f);
    Tensor<S> block_out = concat_channels(parts);
    block_out.check_finite("dense block output");
    if (trace) trace->feats = std::move(feats);
    return block_out;
}

// returns d(block input)
template <class S>
Tensor<S> dense_backward(const ParamSet<S>& p, const NetworkConfig& cfg,
                         const DenseTrace<S>& trace, const Tensor<S>& d_block_out,
                         ParamSet<S>& grads) {
    const S slope = S(cfg.leaky_slope);
    const std::size_t layers = cfg.dense_layers;

    // gradient per stored feature map, fed by the final concat and every
    // later layer that consumed it
    std::vector<Tensor<S>> d_feats(layers + 1);
    std::size_t c0 = 0;
    for (std::size_t i = 0; i <= layers; ++i) {
        const std::size_t c = trace.feats[i].dim(1);
        d_feats[i] = slice_channels(d_block_out, c0, c);
        c0 += c;
    }

    for (std::size_t i = layers; i-- > 0;) {
        const std::string bn = "dense.bn" + std::to_string(i);
        const std::string conv = "dense.conv" + std::to_string(i);
        Tensor<S> d_act = conv2d_backward(trace.act[i], p.at(conv + ".weight"),
                                          d_feats[i + 1], grads.at(conv + ".weight"),
                                          grads.at(conv + ".bias"));
        Tensor<S> d_norm = leaky_relu_backward(trace.bn_out[i], d_act, slope);
        Tensor<S> d_cat = bn_backward(trace.bns[i], p.at(bn + ".gamma"), d_norm,
                                      grads.at(bn + ".gamma"), grads.at(bn + ".beta"));
        std::size_t off = 0;
        for (std::size_t j = 0; j <= i; ++j) {
            const std::size_t c = trace.feats[j].dim(1);
            Tensor<S> part = slice_channels(d_cat, off, c);
            for (std::size_t k = 0; k < part.size(); ++k) d_feats[j][k] += part[k];
            off += c;
        }
    }
    return std::move(d_feats[0]);
}

// ---- full network ------------------------------------------------------------

template <class S>
struct NetTrace {
    Tensor<S> center;                 // (B, 1, H, W) main-branch input
    DenseTrace<S> dense;
    Tensor<S> dense_out;
    std::vector<Tensor<S>> stem_in;   // per-step raw slices
    LstmTrace<S> lstm;
    Tensor<S> h_final;
    HeadTrace<S> head_main, head_attn, head_alpha;
    Tensor<S> alpha;                  // sigmoid output
    Tensor<S> s_main, s_attn;         // fusion inputs
    bool alpha_overridden = false;
};

// windows: (B, window_len, H, W) normalized slices, one input channel.
// Main branch sees the center slice; the attention branch runs the ConvLSTM
// over every slice in ascending order and reads only the final hidden state.
template <class S>
ForwardResult<S> dual_forward(ParamSet<S>& params, const NetworkConfig& cfg,
                              const Tensor<S>& windows, const ForwardOptions<S>& opts,
                              std::type_identity_t<NetTrace<S>>* trace) {
    cfg.validate();
    if (windows.rank() != 4 || windows.dim(1) != cfg.window_len)
        throw DataError("window stack shape does not match window_len");
    windows.check_finite("network input");
    const std::size_t b = windows.dim(0), t_len = windows.dim(1);
    const std::size_t h = windows.dim(2), w = windows.dim(3);
    const std::size_t hw = h * w;

    // main branch: center slice only
    Tensor<S> center({b, 1, h, w});
    for (std::size_t n = 0; n < b; ++n)
        std::copy_n(windows.data() + (n * t_len + t_len / 2) * hw, hw,
                    center.data() + n * hw);
    Tensor<S> dense_out =
        dense_forward(center, params, cfg, opts.mode, trace ? &trace->dense : nullptr);
    Tensor<S> s_main = head_forward(dense_out, params, "head_main", cfg, opts.mode,
                                    trace ? &trace->head_main : nullptr);

    // attention branch: shared 1x1 stem, then the recurrent pass
    std::vector<Tensor<S>> xs(t_len);
    std::vector<Tensor<S>> stem_in(t_len);
    for (std::size_t t = 0; t < t_len; ++t) {
        Tensor<S> slice({b, 1, h, w});
        for (std::size_t n = 0; n < b; ++n)
            std::copy_n(windows.data() + (n * t_len + t) * hw, hw,
                        slice.data() + n * hw);
        xs[t] = conv2d_forward(slice, params.at("stem.weight"), params.at("stem.bias"));
        if (trace) stem_in[t] = std::move(slice);
    }
    Tensor<S> h_final = convlstm_forward(xs, params.at("lstm.weight"),
                                         params.at("lstm.bias"),
                                         trace ? &trace->lstm : nullptr);
    h_final.check_finite("convlstm final state");
    Tensor<S> s_attn = head_forward(h_final, params, "head_attn", cfg, opts.mode,
                                    trace ? &trace->head_attn : nullptr);
    Tensor<S> alpha_logit = head_forward(h_final, params, "head_alpha", cfg, opts.mode,
                                         trace ? &trace->head_alpha : nullptr);
    Tensor<S> alpha = sigmoid_forward(alpha_logit);

    ForwardResult<S> result;
    result.s_out.resize(s_main.dims());
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
            const S* sm = s_main.data() + (n * cfg.num_classes + c) * hw;
            const S* sa = s_attn.data() + (n * cfg.num_classes + c) * hw;
            const S* al = alpha.data() + n * hw;
            S* so = result.s_out.data() + (n * cfg.num_classes + c) * hw;
            if (opts.alpha_override) {
                const S av = *opts.alpha_override;
                for (std::size_t i = 0; i < hw; ++i)
                    so[i] = sm[i] * av + sa[i] * (S(1) - av);
            } else {
                for (std::size_t i = 0; i < hw; ++i)
                    so[i] = sm[i] * al[i] + sa[i] * (S(1) - al[i]);
            }
        }
    if (opts.alpha_override) alpha.fill(*opts.alpha_override);

    if (trace) {
        trace->center = std::move(center);
        trace->dense_out = std::move(dense_out);
        trace->stem_in = std::move(stem_in);
        trace->h_final = std::move(h_final);
        trace->alpha = alpha;
        trace->s_main = s_main;
        trace->s_attn = s_attn;
        trace->alpha_overridden = opts.alpha_override.has_value();
        result.s_main = std::move(s_main);
        result.s_attn = std::move(s_attn);
        result.alpha = std::move(alpha);
    } else {
        result.s_main = std::move(s_main);
        result.s_attn = std::move(s_attn);
        result.alpha = std::move(alpha);
    }
    return result;
}

// d_s_out -> gradients for every trainable tensor (same names as params)
template <class S>
ParamSet<S> dual_backward(const ParamSet<S>& params, const NetworkConfig& cfg,
                          const NetTrace<S>& trace, const Tensor<S>& d_s_out) {
    ParamSet<S> grads = params.zeros_like();
    const std::size_t b = d_s_out.dim(0);
    const std::size_t hw = d_s_out.dim(2) * d_s_out.dim(3);

    Tensor<S> d_s_main(trace.s_main.dims());
    Tensor<S> d_s_attn(trace.s_attn.dims());
    Tensor<S> d_alpha({b, 1, d_s_out.dim(2), d_s_out.dim(3)});
    for (std::size_t n = 0; n < b; ++n) {
        const S* al = trace.alpha.data() + n * hw;
        S* da = d_alpha.data() + n * hw;
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
            const std::size_t off = (n * cfg.num_classes + c) * hw;
            const S* dso = d_s_out.data() + off;
            const S* sm = trace.s_main.data() + off;
            const S* sa = trace.s_attn.data() + off;
            S* dm = d_s_main.data() + off;
            S* dt = d_s_attn.data() + off;
            for (std::size_t i = 0; i < hw; ++i) {
                dm[i] = dso[i] * al[i];
                dt[i] = dso[i] * (S(1) - al[i]);
                da[i] += dso[i] * (sm[i] - sa[i]);
            }
        }
    }

    // main branch
    Tensor<S> d_dense_out = head_backward(trace.dense_out, params, "head_main", cfg,
                                          trace.head_main, d_s_main, grads);
    dense_backward(params, cfg, trace.dense, d_dense_out, grads);

    // attention branch; both heads feed the same hidden state
    Tensor<S> d_h = head_backward(trace.h_final, params, "head_attn", cfg,
                                  trace.head_attn, d_s_attn, grads);
    if (!trace.alpha_overridden) {
        Tensor<S> d_alpha_logit = sigmoid_backward(trace.alpha, d_alpha);
        Tensor<S> d_h2 = head_backward(trace.h_final, params, "head_alpha", cfg,
                                       trace.head_alpha, d_alpha_logit, grads);
        for (std::size_t i = 0; i < d_h.size(); ++i) d_h[i] += d_h2[i];
    }
    std::vector<Tensor<S>> dxs =
        convlstm_backward(trace.lstm, params.at("lstm.weight"), d_h,
                          grads.at("lstm.weight"), grads.at("lstm.bias"));
    for (std::size_t t = 0; t < dxs.size(); ++t)
        conv2d_backward(trace.stem_in[t], params.at("stem.weight"), dxs[t],
                        grads.at("stem.weight"), grads.at("stem.bias"));
    return grads;
}

// per-pixel argmax over fused logits; ties resolve to the lower class code
template <class S>
Tensor<std::uint8_t> decode_labels(const Tensor<S>& s_out) {
    const std::size_t b = s_out.dim(0), c = s_out.dim(1);
    const std::size_t h = s_out.dim(2), w = s_out.dim(3);
    Tensor<std::uint8_t> labels({b, h, w});
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t i = 0; i < h * w; ++i) {
            std::uint8_t best = 0;
            S best_v = s_out.data()[(n * c) * h * w + i];
            for (std::size_t cc = 1; cc < c; ++cc) {
                const S v = s_out.data()[(n * c + cc) * h * w + i];
                if (v > best_v) {
                    best_v = v;
                    best = std::uint8_t(cc);
                }
            }
            labels.data()[n * h * w + i] = best;
        }
    return labels;
}

// eval-mode forward + argmax for a single window
template <class S>
Tensor<std::uint8_t> predict_slice(ParamSet<S>& params, const NetworkConfig& cfg,
                                   const Tensor<S>& window) {
    Tensor<S> batch({1, window.dim(0), window.dim(1), window.dim(2)});
    std::copy_n(window.data(), window.size(), batch.data());
    ForwardOptions<S> opts;
    opts.mode = Mode::kEval;
    ForwardResult<S> out = dual_forward(params, cfg, batch, opts, nullptr);
    Tensor<std::uint8_t> decoded = decode_labels(out.s_out);
    Tensor<std::uint8_t> plane({window.dim(1), window.dim(2)});
    std::copy_n(decoded.data(), plane.size(), plane.data());
    return plane;
}

}  // namespace lungquant::net

#pragma once

#include <utility>
#include <vector>

#include "lungquant/net/layers.hpp"

namespace lungquant::net {

// Gate kernels are packed into one convolution over concat(x, h):
// output channel blocks [i, f, o, g], weight (4H, Cin+H, k, k), bias (4H).
// No peephole terms: c' = f*c + i*g, h' = o*tanh(c').

template <class S>
struct LstmStepCache {
    Tensor<S> z;       // concat(x, h_prev)
    Tensor<S> i, f, o, g;
    Tensor<S> c_prev;
    Tensor<S> tanh_c;
};

template <class S>
struct LstmTrace {
    std::vector<LstmStepCache<S>> steps;
};

namespace detail {

// one gated update; fills cache when given
template <class S>
std::pair<Tensor<S>, Tensor<S>> lstm_step_impl(const Tensor<S>& x, const Tensor<S>& h,
                                               const Tensor<S>& c,
                                               const Tensor<S>& weight,
                                               const Tensor<S>& bias,
                                               LstmStepCache<S>* cache) {
    const std::size_t hidden = weight.dim(0) / 4;
    Tensor<S> z = concat_channels<S>({&x, &h});
    Tensor<S> gates = conv2d_forward(z, weight, bias);

    Tensor<S> gi = slice_channels(gates, 0, hidden);
    Tensor<S> gf = slice_channels(gates, hidden, hidden);
    Tensor<S> go = slice_channels(gates, 2 * hidden, hidden);
    Tensor<S> gg = slice_channels(gates, 3 * hidden, hidden);
    Tensor<S> i = sigmoid_forward(gi);
    Tensor<S> f = sigmoid_forward(gf);
    Tensor<S> o = sigmoid_forward(go);
    Tensor<S> g = tanh_forward(gg);

    Tensor<S> c_new(c.dims());
    for (std::size_t n = 0; n < c.size(); ++n)
        c_new[n] = f[n] * c[n] + i[n] * g[n];
    Tensor<S> tc = tanh_forward(c_new);
    Tensor<S> h_new(c.dims());
    for (std::size_t n = 0; n < c.size(); ++n) h_new[n] = o[n] * tc[n];

    if (cache) {
        cache->z = std::move(z);
        cache->i = std::move(i);
        cache->f = std::move(f);
        cache->o = std::move(o);
        cache->g = std::move(g);
        cache->c_prev = c;
        cache->tanh_c = std::move(tc);
    }
    return {std::move(h_new), std::move(c_new)};
}

}  // namespace detail

template <class S>
std::pair<Tensor<S>, Tensor<S>> conv_lstm_step(const Tensor<S>& x, const Tensor<S>& h,
                                               const Tensor<S>& c,
                                               const Tensor<S>& weight,
                                               const Tensor<S>& bias) {
    x.check_finite("conv_lstm_step input");
    return detail::lstm_step_impl(x, h, c, weight, bias,
                                  static_cast<LstmStepCache<S>*>(nullptr));
}

// Runs the cell over xs in order (ascending slice index) from a zero state and
// returns the final hidden state.
template <class S>
Tensor<S> convlstm_forward(const std::vector<Tensor<S>>& xs, const Tensor<S>& weight,
                           const Tensor<S>& bias, LstmTrace<S>* trace) {
    const std::size_t b = xs[0].dim(0);
    const std::size_t hidden = weight.dim(0) / 4;
    const std::size_t h = xs[0].dim(2), w = xs[0].dim(3);
    Tensor<S> hs({b, hidden, h, w}), cs({b, hidden, h, w});
    if (trace) trace->steps.resize(xs.size());
    for (std::size_t t = 0; t < xs.size(); ++t) {
        auto [h_new, c_new] = detail::lstm_step_impl(
            xs[t], hs, cs, weight, bias, trace ? &trace->steps[t] : nullptr);
        hs = std::move(h_new);
        cs = std::move(c_new);
    }
    return hs;
}

// BPTT from the gradient of the final hidden state; accumulates gate kernel
// grads (shared across steps) and returns per-step input gradients.
template <class S>
std::vector<Tensor<S>> convlstm_backward(const LstmTrace<S>& trace,
                                         const Tensor<S>& weight,
                                         const Tensor<S>& d_h_final,
                                         Tensor<S>& dweight, Tensor<S>& dbias) {
    const std::size_t steps = trace.steps.size();
    const std::size_t hidden = weight.dim(0) / 4;
    const std::size_t c_total = weight.dim(1);  // in + hidden
    const std::size_t c_in = c_total - hidden;

    std::vector<Tensor<S>> dxs(steps);
    Tensor<S> dh = d_h_final;
    Tensor<S> dc(d_h_final.dims());
    for (std::size_t t = steps; t-- > 0;) {
        const auto& st = trace.steps[t];
        const std::size_t spatial = dh.dim(2) * dh.dim(3);
        const std::size_t bsz = dh.dim(0);
        Tensor<S> dgates({bsz, 4 * hidden, dh.dim(2), dh.dim(3)});
        for (std::size_t nb = 0; nb < bsz; ++nb) {
            const std::size_t plane = hidden * spatial;
            const S* dhp = dh.data() + nb * plane;
            const S* dcp_in = dc.data() + nb * plane;
            S* dg_i = dgates.data() + nb * 4 * plane;
            S* dg_f = dg_i + plane;
            S* dg_o = dg_f + plane;
            S* dg_g = dg_o + plane;
            const S* ip = st.i.data() + nb * plane;
            const S* fp = st.f.data() + nb * plane;
            const S* op = st.o.data() + nb * plane;
            const S* gp = st.g.data() + nb * plane;
            const S* tcp = st.tanh_c.data() + nb * plane;
            const S* cprev = st.c_prev.data() + nb * plane;
            S* dcp = dc.data() + nb * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                const S d_o = dhp[k] * tcp[k];
                const S d_c = dcp_in[k] + dhp[k] * op[k] * (S(1) - tcp[k] * tcp[k]);
                const S d_i = d_c * gp[k];
                const S d_f = d_c * cprev[k];
                const S d_g = d_c * ip[k];
                dg_i[k] = d_i * ip[k] * (S(1) - ip[k]);
                dg_f[k] = d_f * fp[k] * (S(1) - fp[k]);
                dg_o[k] = d_o * op[k] * (S(1) - op[k]);
                dg_g[k] = d_g * (S(1) - gp[k] * gp[k]);
                dcp[k] = d_c * fp[k];  // carried to step t-1
            }
        }
        Tensor<S> dz = conv2d_backward(st.z, weight, dgates, dweight, dbias);
        dxs[t] = slice_channels(dz, 0, c_in);
        dh = slice_channels(dz, c_in, hidden);
    }
    return dxs;
}

}  // namespace lungquant::net

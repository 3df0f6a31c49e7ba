#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "lungquant/core/errors.hpp"
#include "lungquant/core/gemm.hpp"
#include "lungquant/core/tensor.hpp"

// Forward/backward primitives over (B, C, H, W) maps. Every backward takes the
// tensors its forward cached and writes parameter gradients by accumulation,
// so shared weights (ConvLSTM gates, the sequence stem) sum naturally.
namespace lungquant::net {

// ---- im2col ----------------------------------------------------------------

// cols is (C*k*k, H*W); same padding, stride 1, odd k.
template <class S>
void im2col(const S* x, std::size_t c_in, std::size_t h, std::size_t w,
            std::size_t k, S* cols) {
    const std::size_t pad = k / 2;
    std::size_t row = 0;
    for (std::size_t c = 0; c < c_in; ++c) {
        const S* plane = x + c * h * w;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj, ++row) {
                S* out = cols + row * h * w;
                const long dy = long(ki) - long(pad), dx = long(kj) - long(pad);
                for (std::size_t y = 0; y < h; ++y) {
                    long sy = long(y) + dy;
                    if (sy < 0 || sy >= long(h)) {
                        std::fill(out + y * w, out + (y + 1) * w, S(0));
                        continue;
                    }
                    const S* src = plane + std::size_t(sy) * w;
                    S* dst = out + y * w;
                    for (std::size_t xo = 0; xo < w; ++xo) {
                        long sx = long(xo) + dx;
                        dst[xo] = (sx < 0 || sx >= long(w)) ? S(0) : src[sx];
                    }
                }
            }
        }
    }
}

// scatter-add of cols (C*k*k, H*W) back into an image; inverse of im2col
template <class S>
void col2im_add(const S* cols, std::size_t c_in, std::size_t h, std::size_t w,
                std::size_t k, S* x) {
    const std::size_t pad = k / 2;
    std::size_t row = 0;
    for (std::size_t c = 0; c < c_in; ++c) {
        S* plane = x + c * h * w;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj, ++row) {
                const S* in = cols + row * h * w;
                const long dy = long(ki) - long(pad), dx = long(kj) - long(pad);
                for (std::size_t y = 0; y < h; ++y) {
                    long sy = long(y) + dy;
                    if (sy < 0 || sy >= long(h)) continue;
                    S* dst = plane + std::size_t(sy) * w;
                    const S* src = in + y * w;
                    for (std::size_t xo = 0; xo < w; ++xo) {
                        long sx = long(xo) + dx;
                        if (sx >= 0 && sx < long(w)) dst[sx] += src[xo];
                    }
                }
            }
        }
    }
}

// ---- conv2d (stride 1, same padding) ---------------------------------------

// x (B, Cin, H, W), weight (Cout, Cin, k, k), bias (Cout) -> (B, Cout, H, W)
template <class S>
Tensor<S> conv2d_forward(const Tensor<S>& x, const Tensor<S>& weight,
                         const Tensor<S>& bias) {
    const std::size_t b = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t c_out = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != c_in) throw DataError("conv2d: channel mismatch");
    const std::size_t ckk = c_in * k * k, hw = h * w;

    Tensor<S> y({b, c_out, h, w});
    std::vector<S> cols(ckk * hw);
    for (std::size_t n = 0; n < b; ++n) {
        im2col(x.data() + n * c_in * hw, c_in, h, w, k, cols.data());
        gemm(false, false, c_out, hw, ckk, S(1), weight.data(), ckk, cols.data(), hw,
             S(0), y.data() + n * c_out * hw, hw);
    }
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t c = 0; c < c_out; ++c) {
            S* plane = y.data() + (n * c_out + c) * hw;
            const S bv = bias[c];
            for (std::size_t i = 0; i < hw; ++i) plane[i] += bv;
        }
    return y;
}

// accumulates into dweight/dbias; returns dx
template <class S>
Tensor<S> conv2d_backward(const Tensor<S>& x, const Tensor<S>& weight,
                          const Tensor<S>& dy, Tensor<S>& dweight, Tensor<S>& dbias) {
    const std::size_t b = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t c_out = weight.dim(0), k = weight.dim(2);
    const std::size_t ckk = c_in * k * k, hw = h * w;

    Tensor<S> dx(x.dims());
    std::vector<S> cols(ckk * hw), dcols(ckk * hw);
    for (std::size_t n = 0; n < b; ++n) {
        const S* dyn = dy.data() + n * c_out * hw;
        im2col(x.data() + n * c_in * hw, c_in, h, w, k, cols.data());
        // dW += dY * cols^T
        gemm(false, true, c_out, ckk, hw, S(1), dyn, hw, cols.data(), hw, S(1),
             dweight.data(), ckk);
        // dcols = W^T * dY
        gemm(true, false, ckk, hw, c_out, S(1), weight.data(), ckk, dyn, hw, S(0),
             dcols.data(), hw);
        col2im_add(dcols.data(), c_in, h, w, k, dx.data() + n * c_in * hw);
        for (std::size_t c = 0; c < c_out; ++c) {
            S acc = 0;
            const S* plane = dyn + c * hw;
            for (std::size_t i = 0; i < hw; ++i) acc += plane[i];
            dbias[c] += acc;
        }
    }
    return dx;
}

// ---- conv3d (stride 1, same padding, cubic kernel) -------------------------

template <class S>
void im2col3d(const S* x, std::size_t c_in, std::size_t d, std::size_t h,
              std::size_t w, std::size_t k, S* cols) {
    const long pad = long(k / 2);
    const std::size_t dhw = d * h * w;
    std::size_t row = 0;
    for (std::size_t c = 0; c < c_in; ++c) {
        const S* vol = x + c * dhw;
        for (std::size_t kz = 0; kz < k; ++kz)
            for (std::size_t ki = 0; ki < k; ++ki)
                for (std::size_t kj = 0; kj < k; ++kj, ++row) {
                    S* out = cols + row * dhw;
                    const long dz = long(kz) - pad, dy = long(ki) - pad,
                               dx = long(kj) - pad;
                    for (std::size_t z = 0; z < d; ++z) {
                        long sz = long(z) + dz;
                        for (std::size_t y = 0; y < h; ++y) {
                            long sy = long(y) + dy;
                            S* dst = out + (z * h + y) * w;
                            if (sz < 0 || sz >= long(d) || sy < 0 || sy >= long(h)) {
                                std::fill(dst, dst + w, S(0));
                                continue;
                            }
                            const S* src = vol + (std::size_t(sz) * h + std::size_t(sy)) * w;
                            for (std::size_t xo = 0; xo < w; ++xo) {
                                long sx = long(xo) + dx;
                                dst[xo] = (sx < 0 || sx >= long(w)) ? S(0) : src[sx];
                            }
                        }
                    }
                }
    }
}

template <class S>
void col2im3d_add(const S* cols, std::size_t c_in, std::size_t d, std::size_t h,
                  std::size_t w, std::size_t k, S* x) {
    const long pad = long(k / 2);
    const std::size_t dhw = d * h * w;
    std::size_t row = 0;
    for (std::size_t c = 0; c < c_in; ++c) {
        S* vol = x + c * dhw;
        for (std::size_t kz = 0; kz < k; ++kz)
            for (std::size_t ki = 0; ki < k; ++ki)
                for (std::size_t kj = 0; kj < k; ++kj, ++row) {
                    const S* in = cols + row * dhw;
                    const long dz = long(kz) - pad, dy = long(ki) - pad,
                               dx = long(kj) - pad;
                    for (std::size_t z = 0; z < d; ++z) {
                        long sz = long(z) + dz;
                        if (sz < 0 || sz >= long(d)) continue;
                        for (std::size_t y = 0; y < h; ++y) {
                            long sy = long(y) + dy;
                            if (sy < 0 || sy >= long(h)) continue;
                            S* dst = vol + (std::size_t(sz) * h + std::size_t(sy)) * w;
                            const S* src = in + (z * h + y) * w;
                            for (std::size_t xo = 0; xo < w; ++xo) {
                                long sx = long(xo) + dx;
                                if (sx >= 0 && sx < long(w)) dst[sx] += src[xo];
                            }
                        }
                    }
                }
    }
}

// x (B, Cin, D, H, W), weight (Cout, Cin, k, k, k) -> (B, Cout, D, H, W)
template <class S>
Tensor<S> conv3d_forward(const Tensor<S>& x, const Tensor<S>& weight,
                         const Tensor<S>& bias) {
    const std::size_t b = x.dim(0), c_in = x.dim(1);
    const std::size_t d = x.dim(2), h = x.dim(3), w = x.dim(4);
    const std::size_t c_out = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != c_in) throw DataError("conv3d: channel mismatch");
    const std::size_t ckkk = c_in * k * k * k, dhw = d * h * w;

    Tensor<S> y({b, c_out, d, h, w});
    std::vector<S> cols(ckkk * dhw);
    for (std::size_t n = 0; n < b; ++n) {
        im2col3d(x.data() + n * c_in * dhw, c_in, d, h, w, k, cols.data());
        gemm(false, false, c_out, dhw, ckkk, S(1), weight.data(), ckkk, cols.data(),
             dhw, S(0), y.data() + n * c_out * dhw, dhw);
    }
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t c = 0; c < c_out; ++c) {
            S* plane = y.data() + (n * c_out + c) * dhw;
            const S bv = bias[c];
            for (std::size_t i = 0; i < dhw; ++i) plane[i] += bv;
        }
    return y;
}

template <class S>
Tensor<S> conv3d_backward(const Tensor<S>& x, const Tensor<S>& weight,
                          const Tensor<S>& dy, Tensor<S>& dweight, Tensor<S>& dbias) {
    const std::size_t b = x.dim(0), c_in = x.dim(1);
    const std::size_t d = x.dim(2), h = x.dim(3), w = x.dim(4);
    const std::size_t c_out = weight.dim(0), k = weight.dim(2);
    const std::size_t ckkk = c_in * k * k * k, dhw = d * h * w;

    Tensor<S> dx(x.dims());
    std::vector<S> cols(ckkk * dhw), dcols(ckkk * dhw);
    for (std::size_t n = 0; n < b; ++n) {
        const S* dyn = dy.data() + n * c_out * dhw;
        im2col3d(x.data() + n * c_in * dhw, c_in, d, h, w, k, cols.data());
        gemm(false, true, c_out, ckkk, dhw, S(1), dyn, dhw, cols.data(), dhw, S(1),
             dweight.data(), ckkk);
        gemm(true, false, ckkk, dhw, c_out, S(1), weight.data(), ckkk, dyn, dhw, S(0),
             dcols.data(), dhw);
        col2im3d_add(dcols.data(), c_in, d, h, w, k, dx.data() + n * c_in * dhw);
        for (std::size_t c = 0; c < c_out; ++c) {
            S acc = 0;
            const S* plane = dyn + c * dhw;
            for (std::size_t i = 0; i < dhw; ++i) acc += plane[i];
            dbias[c] += acc;
        }
    }
    return dx;
}

// ---- batch norm ------------------------------------------------------------

inline constexpr double kBnEps = 1e-5;

template <class S>
struct BnCache {
    Tensor<S> x_hat;            // normalized input
    std::vector<S> inv_std;     // per channel
};

// Train mode: batch statistics over B*spatial per channel; running stats get
// momentum-0.1 updates (unbiased variance). Works for (B,C,...) of any rank.
template <class S>
Tensor<S> bn_forward_train(const Tensor<S>& x, const Tensor<S>& gamma,
                           const Tensor<S>& beta, Tensor<S>& run_mean,
                           Tensor<S>& run_var, S momentum, BnCache<S>& cache) {
    const std::size_t b = x.dim(0), c = x.dim(1);
    const std::size_t spatial = x.size() / (b * c);
    const std::size_t n = b * spatial;

    Tensor<S> y(x.dims());
    cache.x_hat.resize(x.dims());
    cache.inv_std.assign(c, S(0));
    for (std::size_t ch = 0; ch < c; ++ch) {
        S mean = 0;
        for (std::size_t nb = 0; nb < b; ++nb) {
            const S* p = x.data() + (nb * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) mean += p[i];
        }
        mean /= S(n);
        S var = 0;
        for (std::size_t nb = 0; nb < b; ++nb) {
            const S* p = x.data() + (nb * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) var += (p[i] - mean) * (p[i] - mean);
        }
        var /= S(n);
        const S inv = S(1) / std::sqrt(var + S(kBnEps));
        cache.inv_std[ch] = inv;
        const S g = gamma[ch], be = beta[ch];
        for (std::size_t nb = 0; nb < b; ++nb) {
            const S* p = x.data() + (nb * c + ch) * spatial;
            S* xh = cache.x_hat.data() + (nb * c + ch) * spatial;
            S* yo = y.data() + (nb * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                xh[i] = (p[i] - mean) * inv;
                yo[i] = g * xh[i] + be;
            }
        }
        const S unbiased = n > 1 ? var * S(n) / S(n - 1) : var;
        run_mean[ch] = (S(1) - momentum) * run_mean[ch] + momentum * mean;
        run_var[ch] = (S(1) - momentum) * run_var[ch] + momentum * unbiased;
    }
    return y;
}

template <class S>
Tensor<S> bn_forward_eval(const Tensor<S>& x, const Tensor<S>& gamma,
                          const Tensor<S>& beta, const Tensor<S>& run_mean,
                          const Tensor<S>& run_var) {
    const std::size_t b = x.dim(0), c = x.dim(1);
    const std::size_t spatial = x.size() / (b * c);
    Tensor<S> y(x.dims());
    for (std::size_t ch = 0; ch < c; ++ch) {
        const S inv = S(1) / std::sqrt(run_var[ch] + S(kBnEps));
        const S g = gamma[ch], be = beta[ch], m = run_mean[ch];
        for (std::size_t nb = 0; nb < b; ++nb) {
            const S* p = x.data() + (nb * c + ch) * spatial;
            S* yo = y.data() + (nb * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) yo[i] = g * (p[i] - m) * inv + be;
        }
    }
    return y;
}

template <class S>
Tensor<S> bn_backward(const BnCache<S>& cache, const Tensor<S>& gamma,
                      const Tensor<S>& dy, Tensor<S>& dgamma, Tensor<S>& dbeta) {
    const std::size_t b = dy.dim(0), c = dy.dim(1);
    const std::size_t spatial = dy.size() / (b * c);
    const std::size_t n = b * spatial;

    Tensor<S> dx(dy.dims());
    for (std::size_t ch = 0; ch < c; ++ch) {
        S sum_dy = 0, sum_dy_xh = 0;
        for (std::size_t nb = 0; nb < b; ++nb) {
            const S* d = dy.data() + (nb * c + ch) * spatial;
            const S* xh = cache.x_hat.data() + (nb * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                sum_dy += d[i];
                sum_dy_xh += d[i] * xh[i];
            }
        }
        dbeta[ch] += sum_dy;
        dgamma[ch] += sum_dy_xh;
        const S scale = gamma[ch] * cache.inv_std[ch] / S(n);
        for (std::size_t nb = 0; nb < b; ++nb) {
            const S* d = dy.data() + (nb * c + ch) * spatial;
            const S* xh = cache.x_hat.data() + (nb * c + ch) * spatial;
            S* o = dx.data() + (nb * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i)
                o[i] = scale * (S(n) * d[i] - sum_dy - xh[i] * sum_dy_xh);
        }
    }
    return dx;
}

// ---- activations -----------------------------------------------------------

template <class S>
Tensor<S> leaky_relu_forward(const Tensor<S>& x, S slope) {
    Tensor<S> y(x.dims());
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = x[i] > S(0) ? x[i] : slope * x[i];
    return y;
}

template <class S>
Tensor<S> leaky_relu_backward(const Tensor<S>& x, const Tensor<S>& dy, S slope) {
    Tensor<S> dx(x.dims());
    for (std::size_t i = 0; i < x.size(); ++i)
        dx[i] = x[i] > S(0) ? dy[i] : slope * dy[i];
    return dx;
}

template <class S>
S sigmoid_scalar(S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    const S e = std::exp(x);
    return e / (S(1) + e);
}

template <class S>
Tensor<S> sigmoid_forward(const Tensor<S>& x) {
    Tensor<S> y(x.dims());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
    return y;
}

// dy/dx from the cached output
template <class S>
Tensor<S> sigmoid_backward(const Tensor<S>& y, const Tensor<S>& dy) {
    Tensor<S> dx(y.dims());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (S(1) - y[i]);
    return dx;
}

template <class S>
Tensor<S> tanh_forward(const Tensor<S>& x) {
    Tensor<S> y(x.dims());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
    return y;
}

template <class S>
Tensor<S> tanh_backward(const Tensor<S>& y, const Tensor<S>& dy) {
    Tensor<S> dx(y.dims());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * (S(1) - y[i] * y[i]);
    return dx;
}

// ---- channel concat --------------------------------------------------------

template <class S>
Tensor<S> concat_channels(const std::vector<const Tensor<S>*>& parts) {
    const std::size_t b = parts[0]->dim(0);
    std::size_t c_total = 0;
    for (const auto* p : parts) c_total += p->dim(1);
    std::vector<std::size_t> dims = parts[0]->dims();
    dims[1] = c_total;
    const std::size_t spatial = parts[0]->size() / (b * parts[0]->dim(1));

    Tensor<S> y(dims);
    for (std::size_t n = 0; n < b; ++n) {
        std::size_t co = 0;
        for (const auto* p : parts) {
            const std::size_t pc = p->dim(1);
            std::copy_n(p->data() + n * pc * spatial, pc * spatial,
                        y.data() + (n * c_total + co) * spatial);
            co += pc;
        }
    }
    return y;
}

// slices channel range [c0, c0+len) of dy into a (B, len, ...) gradient
template <class S>
Tensor<S> slice_channels(const Tensor<S>& x, std::size_t c0, std::size_t len) {
    const std::size_t b = x.dim(0), c = x.dim(1);
    const std::size_t spatial = x.size() / (b * c);
    std::vector<std::size_t> dims = x.dims();
    dims[1] = len;
    Tensor<S> y(dims);
    for (std::size_t n = 0; n < b; ++n)
        std::copy_n(x.data() + (n * c + c0) * spatial, len * spatial,
                    y.data() + n * len * spatial);
    return y;
}

// ---- pooling / upsampling (encoder-decoder baselines) ----------------------

template <class S>
Tensor<S> maxpool2x2_forward(const Tensor<S>& x, Tensor<std::uint32_t>& argmax) {
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor<S> y({b, c, oh, ow});
    argmax.resize({b, c, oh, ow});
    for (std::size_t nc = 0; nc < b * c; ++nc) {
        const S* in = x.data() + nc * h * w;
        S* out = y.data() + nc * oh * ow;
        std::uint32_t* am = argmax.data() + nc * oh * ow;
        for (std::size_t yo = 0; yo < oh; ++yo)
            for (std::size_t xo = 0; xo < ow; ++xo) {
                std::size_t base = 2 * yo * w + 2 * xo;
                std::size_t best = base;
                for (std::size_t cand :
                     {base + 1, base + w, base + w + 1})
                    if (in[cand] > in[best]) best = cand;
                out[yo * ow + xo] = in[best];
                am[yo * ow + xo] = std::uint32_t(best);
            }
    }
    return y;
}

template <class S>
Tensor<S> maxpool2x2_backward(const Tensor<std::uint32_t>& argmax,
                              const Tensor<S>& dy, std::size_t h, std::size_t w) {
    const std::size_t b = dy.dim(0), c = dy.dim(1);
    const std::size_t oh = dy.dim(2), ow = dy.dim(3);
    Tensor<S> dx({b, c, h, w});
    for (std::size_t nc = 0; nc < b * c; ++nc) {
        const S* d = dy.data() + nc * oh * ow;
        const std::uint32_t* am = argmax.data() + nc * oh * ow;
        S* o = dx.data() + nc * h * w;
        for (std::size_t i = 0; i < oh * ow; ++i) o[am[i]] += d[i];
    }
    return dx;
}

template <class S>
Tensor<S> upsample2x_forward(const Tensor<S>& x) {
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<S> y({b, c, 2 * h, 2 * w});
    for (std::size_t nc = 0; nc < b * c; ++nc) {
        const S* in = x.data() + nc * h * w;
        S* out = y.data() + nc * 4 * h * w;
        for (std::size_t yo = 0; yo < 2 * h; ++yo)
            for (std::size_t xo = 0; xo < 2 * w; ++xo)
                out[yo * 2 * w + xo] = in[(yo / 2) * w + xo / 2];
    }
    return y;
}

template <class S>
Tensor<S> upsample2x_backward(const Tensor<S>& dy) {
    const std::size_t b = dy.dim(0), c = dy.dim(1);
    const std::size_t h = dy.dim(2) / 2, w = dy.dim(3) / 2;
    Tensor<S> dx({b, c, h, w});
    for (std::size_t nc = 0; nc < b * c; ++nc) {
        const S* d = dy.data() + nc * 4 * h * w;
        S* o = dx.data() + nc * h * w;
        for (std::size_t yo = 0; yo < 2 * h; ++yo)
            for (std::size_t xo = 0; xo < 2 * w; ++xo)
                o[(yo / 2) * w + xo / 2] += d[yo * 2 * w + xo];
    }
    return dx;
}

template <class S>
Tensor<S> maxpool3d2_forward(const Tensor<S>& x, Tensor<std::uint32_t>& argmax) {
    const std::size_t b = x.dim(0), c = x.dim(1);
    const std::size_t d = x.dim(2), h = x.dim(3), w = x.dim(4);
    const std::size_t od = d / 2, oh = h / 2, ow = w / 2;
    Tensor<S> y({b, c, od, oh, ow});
    argmax.resize({b, c, od, oh, ow});
    for (std::size_t nc = 0; nc < b * c; ++nc) {
        const S* in = x.data() + nc * d * h * w;
        S* out = y.data() + nc * od * oh * ow;
        std::uint32_t* am = argmax.data() + nc * od * oh * ow;
        for (std::size_t zo = 0; zo < od; ++zo)
            for (std::size_t yo = 0; yo < oh; ++yo)
                for (std::size_t xo = 0; xo < ow; ++xo) {
                    std::size_t best = 0;
                    S best_v = 0;
                    bool first = true;
                    for (std::size_t dz = 0; dz < 2; ++dz)
                        for (std::size_t dyy = 0; dyy < 2; ++dyy)
                            for (std::size_t dxx = 0; dxx < 2; ++dxx) {
                                std::size_t idx = ((2 * zo + dz) * h + 2 * yo + dyy) * w +
                                                  2 * xo + dxx;
                                if (first || in[idx] > best_v) {
                                    best = idx;
                                    best_v = in[idx];
                                    first = false;
                                }
                            }
                    out[(zo * oh + yo) * ow + xo] = best_v;
                    am[(zo * oh + yo) * ow + xo] = std::uint32_t(best);
                }
    }
    return y;
}

template <class S>
Tensor<S> maxpool3d2_backward(const Tensor<std::uint32_t>& argmax, const Tensor<S>& dy,
                              std::size_t d, std::size_t h, std::size_t w) {
    const std::size_t b = dy.dim(0), c = dy.dim(1);
    const std::size_t n_out = dy.size() / (b * c);
    Tensor<S> dx({b, c, d, h, w});
    for (std::size_t nc = 0; nc < b * c; ++nc) {
        const S* dd = dy.data() + nc * n_out;
        const std::uint32_t* am = argmax.data() + nc * n_out;
        S* o = dx.data() + nc * d * h * w;
        for (std::size_t i = 0; i < n_out; ++i) o[am[i]] += dd[i];
    }
    return dx;
}

template <class S>
Tensor<S> upsample3d2_forward(const Tensor<S>& x) {
    const std::size_t b = x.dim(0), c = x.dim(1);
    const std::size_t d = x.dim(2), h = x.dim(3), w = x.dim(4);
    Tensor<S> y({b, c, 2 * d, 2 * h, 2 * w});
    for (std::size_t nc = 0; nc < b * c; ++nc) {
        const S* in = x.data() + nc * d * h * w;
        S* out = y.data() + nc * 8 * d * h * w;
        for (std::size_t zo = 0; zo < 2 * d; ++zo)
            for (std::size_t yo = 0; yo < 2 * h; ++yo)
                for (std::size_t xo = 0; xo < 2 * w; ++xo)
                    out[(zo * 2 * h + yo) * 2 * w + xo] =
                        in[((zo / 2) * h + yo / 2) * w + xo / 2];
    }
    return y;
}

template <class S>
Tensor<S> upsample3d2_backward(const Tensor<S>& dy) {
    const std::size_t b = dy.dim(0), c = dy.dim(1);
    const std::size_t d = dy.dim(2) / 2, h = dy.dim(3) / 2, w = dy.dim(4) / 2;
    Tensor<S> dx({b, c, d, h, w});
    for (std::size_t nc = 0; nc < b * c; ++nc) {
        const S* dd = dy.data() + nc * 8 * d * h * w;
        S* o = dx.data() + nc * d * h * w;
        for (std::size_t zo = 0; zo < 2 * d; ++zo)
            for (std::size_t yo = 0; yo < 2 * h; ++yo)
                for (std::size_t xo = 0; xo < 2 * w; ++xo)
                    o[((zo / 2) * h + yo / 2) * w + xo / 2] +=
                        dd[(zo * 2 * h + yo) * 2 * w + xo];
    }
    return dx;
}

}  // namespace lungquant::net

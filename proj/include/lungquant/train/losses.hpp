#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "lungquant/core/errors.hpp"
#include "lungquant/core/gemm.hpp"
#include "lungquant/core/tensor.hpp"

namespace lungquant::train {

enum class LossKind { kRmi, kCeDice };

// `ce` is the unweighted cross-entropy component; `aux` the second component
// (region term or dice complement). total = 0.5*ce + 0.5*aux for the region
// loss, ce + aux for ce_dice.
template <class S>
struct LossValue {
    S total = 0;
    S ce = 0;
    S aux = 0;
};

// region-loss constants
inline constexpr std::size_t kRegionSide = 3;       // 3x3 neighborhoods, d = 9
inline constexpr std::size_t kPoolSide = 3;         // 3x3 stride-3 average pool
inline constexpr std::size_t kPoolMinSize = 12;     // pool only when min(H,W) >= 12
inline constexpr double kCovEps = 1e-5;             // ridge before log-determinant

namespace detail {

// ---- small dense linear algebra (d x d, row-major) -------------------------

// in-place lower Cholesky; false on a non-positive pivot
template <class S>
bool cholesky(S* a, std::size_t d) {
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            S sum = a[i * d + j];
            for (std::size_t k = 0; k < j; ++k) sum -= a[i * d + k] * a[j * d + k];
            if (i == j) {
                if (!(sum > S(0))) return false;
                a[i * d + i] = std::sqrt(sum);
            } else {
                a[i * d + j] = sum / a[j * d + j];
            }
        }
        for (std::size_t j = i + 1; j < d; ++j) a[i * d + j] = S(0);
    }
    return true;
}

template <class S>
S chol_logdet(const S* l, std::size_t d) {
    S acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += std::log(l[i * d + i]);
    return S(2) * acc;
}

// solves (L L^T) X = B for row-major B (d x ncols), in place
template <class S>
void chol_solve(const S* l, std::size_t d, S* b, std::size_t ncols) {
    for (std::size_t c = 0; c < ncols; ++c) {
        for (std::size_t i = 0; i < d; ++i) {
            S sum = b[i * ncols + c];
            for (std::size_t k = 0; k < i; ++k) sum -= l[i * d + k] * b[k * ncols + c];
            b[i * ncols + c] = sum / l[i * d + i];
        }
        for (std::size_t i = d; i-- > 0;) {
            S sum = b[i * ncols + c];
            for (std::size_t k = i + 1; k < d; ++k) sum -= l[k * d + i] * b[k * ncols + c];
            b[i * ncols + c] = sum / l[i * d + i];
        }
    }
}

template <class S>
void transpose(const S* a, std::size_t rows, std::size_t cols, S* at) {
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) at[j * rows + i] = a[i * cols + j];
}

// Cholesky with escalating ridge; throws NumericError when the matrix stays
// indefinite even after heavy regularization.
template <class S>
S ridged_cholesky(const std::vector<S>& sym, std::size_t d, std::vector<S>& l_out) {
    S eps = S(kCovEps);
    for (int attempt = 0; attempt < 6; ++attempt, eps *= S(10)) {
        l_out.assign(sym.begin(), sym.end());
        for (std::size_t i = 0; i < d; ++i) l_out[i * d + i] += eps;
        if (cholesky(l_out.data(), d)) return eps;
    }
    throw NumericError("region covariance not positive definite after ridging");
}

// ---- softmax ----------------------------------------------------------------

template <class S>
Tensor<S> softmax_channels(const Tensor<S>& logits) {
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    const std::size_t hw = logits.size() / (b * c);
    Tensor<S> probs(logits.dims());
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t i = 0; i < hw; ++i) {
            S mx = logits.data()[n * c * hw + i];
            for (std::size_t k = 1; k < c; ++k)
                mx = std::max(mx, logits.data()[(n * c + k) * hw + i]);
            S denom = 0;
            for (std::size_t k = 0; k < c; ++k) {
                const S e = std::exp(logits.data()[(n * c + k) * hw + i] - mx);
                probs.data()[(n * c + k) * hw + i] = e;
                denom += e;
            }
            for (std::size_t k = 0; k < c; ++k)
                probs.data()[(n * c + k) * hw + i] /= denom;
        }
    return probs;
}

// d_logits = p * (d_p - sum_k p_k d_p_k), accumulated into d_logits
template <class S>
void softmax_backward_add(const Tensor<S>& probs, const Tensor<S>& d_probs,
                          Tensor<S>& d_logits) {
    const std::size_t b = probs.dim(0), c = probs.dim(1);
    const std::size_t hw = probs.size() / (b * c);
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t i = 0; i < hw; ++i) {
            S dot = 0;
            for (std::size_t k = 0; k < c; ++k)
                dot += probs.data()[(n * c + k) * hw + i] *
                       d_probs.data()[(n * c + k) * hw + i];
            for (std::size_t k = 0; k < c; ++k) {
                const std::size_t idx = (n * c + k) * hw + i;
                d_logits.data()[idx] += probs.data()[idx] * (d_probs.data()[idx] - dot);
            }
        }
}

// mean pixel NLL; optionally accumulates its gradient (scaled by weight) into
// d_logits — the softmax+NLL gradient collapses to (p - y)/N
template <class S>
S cross_entropy(const Tensor<S>& probs, const Tensor<std::uint8_t>& target,
                S weight, Tensor<S>* d_logits) {
    const std::size_t b = probs.dim(0), c = probs.dim(1);
    const std::size_t hw = probs.size() / (b * c);
    const S n_pix = S(b * hw);
    S loss = 0;
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t i = 0; i < hw; ++i) {
            const std::uint8_t t = target.data()[n * hw + i];
            if (t >= c) throw DataError("target label outside class range");
            const S p = probs.data()[(n * c + t) * hw + i];
            loss -= std::log(std::max(p, S(1e-30)));
        }
    loss /= n_pix;
    if (d_logits) {
        for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < hw; ++i) {
                const std::uint8_t t = target.data()[n * hw + i];
                for (std::size_t k = 0; k < c; ++k) {
                    const std::size_t idx = (n * c + k) * hw + i;
                    const S y = k == t ? S(1) : S(0);
                    d_logits->data()[idx] += weight * (probs.data()[idx] - y) / n_pix;
                }
            }
    }
    return loss;
}

// 3x3 stride-3 average pool of one plane (truncating remainder rows/cols)
template <class S>
void avgpool3(const S* in, std::size_t h, std::size_t w, S* out, std::size_t oh,
              std::size_t ow) {
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            S acc = 0;
            for (std::size_t ky = 0; ky < kPoolSide; ++ky)
                for (std::size_t kx = 0; kx < kPoolSide; ++kx)
                    acc += in[(y * kPoolSide + ky) * w + x * kPoolSide + kx];
            out[y * ow + x] = acc / S(kPoolSide * kPoolSide);
        }
}

template <class S>
void avgpool3_backward_add(const S* d_out, std::size_t oh, std::size_t ow, S* d_in,
                           std::size_t w) {
    const S scale = S(1) / S(kPoolSide * kPoolSide);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            const S g = d_out[y * ow + x] * scale;
            for (std::size_t ky = 0; ky < kPoolSide; ++ky)
                for (std::size_t kx = 0; kx < kPoolSide; ++kx)
                    d_in[(y * kPoolSide + ky) * w + x * kPoolSide + kx] += g;
        }
}

// Posterior-covariance log-determinant term for one (sample, class) plane:
// 0.5 * logdet(Sigma_y - Sigma_yp (Sigma_p + eps I)^-1 Sigma_yp^T + eps I) / d.
// When grad_scale != 0, accumulates d(term_scaled)/d(p_plane) into d_p_plane.
template <class S>
S region_term_and_grad(const S* y_plane, const S* p_plane, std::size_t hp,
                       std::size_t wp, S grad_scale, S* d_p_plane) {
    const std::size_t r = kRegionSide;
    if (hp < r || wp < r) return S(0);
    const std::size_t d = r * r;
    const std::size_t mh = hp - r + 1, mw = wp - r + 1;
    const std::size_t m = mh * mw;

    // region vectors as rows of d x m matrices, then row-centered
    std::vector<S> yc(d * m), pc(d * m);
    for (std::size_t ky = 0; ky < r; ++ky)
        for (std::size_t kx = 0; kx < r; ++kx) {
            const std::size_t row = ky * r + kx;
            for (std::size_t yy = 0; yy < mh; ++yy)
                for (std::size_t xx = 0; xx < mw; ++xx) {
                    const std::size_t col = yy * mw + xx;
                    yc[row * m + col] = y_plane[(yy + ky) * wp + xx + kx];
                    pc[row * m + col] = p_plane[(yy + ky) * wp + xx + kx];
                }
        }
    for (std::size_t row = 0; row < d; ++row) {
        S ym = 0, pm = 0;
        for (std::size_t col = 0; col < m; ++col) {
            ym += yc[row * m + col];
            pm += pc[row * m + col];
        }
        ym /= S(m);
        pm /= S(m);
        for (std::size_t col = 0; col < m; ++col) {
            yc[row * m + col] -= ym;
            pc[row * m + col] -= pm;
        }
    }

    std::vector<S> sy(d * d), sp(d * d), syp(d * d);
    gemm(false, true, d, d, m, S(1), yc.data(), m, yc.data(), m, S(0), sy.data(), d);
    gemm(false, true, d, d, m, S(1), pc.data(), m, pc.data(), m, S(0), sp.data(), d);
    gemm(false, true, d, d, m, S(1), yc.data(), m, pc.data(), m, S(0), syp.data(), d);

    // w = (sp + eps I)^-1 syp^T
    std::vector<S> l_m;
    ridged_cholesky(sp, d, l_m);
    std::vector<S> w(d * d);
    transpose(syp.data(), d, d, w.data());
    chol_solve(l_m.data(), d, w.data(), d);

    // a = sy - syp w + eps I
    std::vector<S> a(d * d);
    gemm(false, false, d, d, d, S(-1), syp.data(), d, w.data(), d, S(0), a.data(), d);
    for (std::size_t i = 0; i < d * d; ++i) a[i] += sy[i];
    std::vector<S> l_a;
    ridged_cholesky(a, d, l_a);
    const S term = S(0.5) * chol_logdet(l_a.data(), d) / S(d);

    if (grad_scale != S(0) && d_p_plane) {
        // ga = grad_scale * 0.5/d * a^-1
        std::vector<S> ga(d * d, S(0));
        for (std::size_t i = 0; i < d; ++i) ga[i * d + i] = S(1);
        chol_solve(l_a.data(), d, ga.data(), d);
        const S ga_scale = grad_scale * S(0.5) / S(d);
        for (std::size_t i = 0; i < d * d; ++i) ga[i] *= ga_scale;

        // x1 = ga syp;  gyp^T = -2 (sp+eps)^-1 x1^T;  gm = w x1 (sp+eps)^-1
        std::vector<S> x1(d * d), tmp(d * d);
        gemm(false, false, d, d, d, S(1), ga.data(), d, syp.data(), d, S(0), x1.data(), d);
        std::vector<S> gyp_t(d * d);
        transpose(x1.data(), d, d, gyp_t.data());
        chol_solve(l_m.data(), d, gyp_t.data(), d);
        for (std::size_t i = 0; i < d * d; ++i) gyp_t[i] *= S(-2);

        std::vector<S> x2(d * d), gm(d * d);
        gemm(false, false, d, d, d, S(1), w.data(), d, x1.data(), d, S(0), x2.data(), d);
        transpose(x2.data(), d, d, tmp.data());
        chol_solve(l_m.data(), d, tmp.data(), d);
        transpose(tmp.data(), d, d, gm.data());

        // d pc = 2 gm pc + gyp^T yc, then row-center (centering is idempotent
        // in the adjoint) and scatter back through the region extraction
        std::vector<S> dpc(d * m);
        gemm(false, false, d, m, d, S(2), gm.data(), d, pc.data(), m, S(0), dpc.data(), m);
        gemm(false, false, d, m, d, S(1), gyp_t.data(), d, yc.data(), m, S(1), dpc.data(), m);
        for (std::size_t row = 0; row < d; ++row) {
            S mean = 0;
            for (std::size_t col = 0; col < m; ++col) mean += dpc[row * m + col];
            mean /= S(m);
            for (std::size_t col = 0; col < m; ++col) dpc[row * m + col] -= mean;
        }
        for (std::size_t ky = 0; ky < r; ++ky)
            for (std::size_t kx = 0; kx < r; ++kx) {
                const std::size_t row = ky * r + kx;
                for (std::size_t yy = 0; yy < mh; ++yy)
                    for (std::size_t xx = 0; xx < mw; ++xx)
                        d_p_plane[(yy + ky) * wp + xx + kx] +=
                            dpc[row * m + yy * mw + xx];
            }
    }
    return term;
}

template <class S>
void one_hot_plane(const Tensor<std::uint8_t>& target, std::size_t n, std::size_t cls,
                   std::size_t hw, S* out) {
    const std::uint8_t* t = target.data() + n * hw;
    for (std::size_t i = 0; i < hw; ++i) out[i] = t[i] == cls ? S(1) : S(0);
}

}  // namespace detail

// Region-information loss: 0.5 * pixel cross-entropy + 0.5 * mean over
// (sample, class) of the posterior-covariance log-det term, computed on 3x3
// stride-3 average-pooled maps when the plane is at least 12 pixels on a side.
// d_logits (when non-null) receives the full gradient.
template <class S>
LossValue<S> rmi_loss(const Tensor<S>& logits, const Tensor<std::uint8_t>& target,
                      Tensor<S>* d_logits) {
    if (logits.rank() != 4) throw DataError("region loss expects (B,C,H,W) logits");
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    const std::size_t h = logits.dim(2), w = logits.dim(3);
    const std::size_t hw = h * w;
    if (target.dim(0) != b || target.dim(1) != h || target.dim(2) != w)
        throw DataError("loss target shape mismatch");
    if (d_logits) {
        d_logits->resize(logits.dims());
        d_logits->zero();
    }

    Tensor<S> probs = detail::softmax_channels(logits);
    LossValue<S> v;
    v.ce = detail::cross_entropy(probs, target, S(0.5), d_logits);

    const bool pool = std::min(h, w) >= kPoolMinSize;
    const std::size_t hp = pool ? h / kPoolSide : h;
    const std::size_t wp = pool ? w / kPoolSide : w;
    std::vector<S> y_plane(hp * wp), p_plane(hp * wp), y_full(hw);
    Tensor<S> d_probs;
    if (d_logits) d_probs.resize(probs.dims());
    std::vector<S> d_p_plane(hp * wp);

    const S grad_scale = S(0.5) / S(b * c);  // 0.5 weight, mean over planes
    S region_sum = 0;
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t cls = 0; cls < c; ++cls) {
            detail::one_hot_plane(target, n, cls, hw, y_full.data());
            const S* p_src = probs.data() + (n * c + cls) * hw;
            if (pool) {
                detail::avgpool3(y_full.data(), h, w, y_plane.data(), hp, wp);
                detail::avgpool3(p_src, h, w, p_plane.data(), hp, wp);
            } else {
                std::copy_n(y_full.data(), hw, y_plane.data());
                std::copy_n(p_src, hw, p_plane.data());
            }
            std::fill(d_p_plane.begin(), d_p_plane.end(), S(0));
            region_sum += detail::region_term_and_grad(
                y_plane.data(), p_plane.data(), hp, wp,
                d_logits ? grad_scale : S(0), d_logits ? d_p_plane.data() : nullptr);
            if (d_logits) {
                S* dp = d_probs.data() + (n * c + cls) * hw;
                if (pool)
                    detail::avgpool3_backward_add(d_p_plane.data(), hp, wp, dp, w);
                else
                    for (std::size_t i = 0; i < hw; ++i) dp[i] += d_p_plane[i];
            }
        }
    v.aux = region_sum / S(b * c);
    v.total = S(0.5) * v.ce + S(0.5) * v.aux;
    if (d_logits) detail::softmax_backward_add(probs, d_probs, *d_logits);
    return v;
}

// per-class soft dice over the whole batch with +1 smoothing
template <class S>
std::vector<S> soft_dice_per_class(const Tensor<S>& probs,
                                   const Tensor<std::uint8_t>& target) {
    const std::size_t b = probs.dim(0), c = probs.dim(1);
    const std::size_t hw = probs.size() / (b * c);
    std::vector<S> dice(c);
    for (std::size_t cls = 0; cls < c; ++cls) {
        S inter = 0, psum = 0, ysum = 0;
        for (std::size_t n = 0; n < b; ++n) {
            const S* p = probs.data() + (n * c + cls) * hw;
            const std::uint8_t* t = target.data() + n * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const S y = t[i] == cls ? S(1) : S(0);
                inter += p[i] * y;
                psum += p[i];
                ysum += y;
            }
        }
        dice[cls] = (S(2) * inter + S(1)) / (psum + ysum + S(1));
    }
    return dice;
}

// pixel cross-entropy + mean per-class soft-dice complement; accepts any
// spatial rank (dice and CE see voxels, not geometry)
template <class S>
LossValue<S> ce_dice_loss(const Tensor<S>& logits, const Tensor<std::uint8_t>& target,
                          Tensor<S>* d_logits) {
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    const std::size_t hw = logits.size() / (b * c);
    if (target.dim(0) != b || target.size() != b * hw)
        throw DataError("loss target shape mismatch");
    if (d_logits) {
        d_logits->resize(logits.dims());
        d_logits->zero();
    }

    Tensor<S> probs = detail::softmax_channels(logits);
    LossValue<S> v;
    v.ce = detail::cross_entropy(probs, target, S(1), d_logits);

    std::vector<S> inter(c, S(0)), psum(c, S(0)), ysum(c, S(0));
    for (std::size_t cls = 0; cls < c; ++cls)
        for (std::size_t n = 0; n < b; ++n) {
            const S* p = probs.data() + (n * c + cls) * hw;
            const std::uint8_t* t = target.data() + n * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const S y = t[i] == cls ? S(1) : S(0);
                inter[cls] += p[i] * y;
                psum[cls] += p[i];
                ysum[cls] += y;
            }
        }
    S dice_sum = 0;
    for (std::size_t cls = 0; cls < c; ++cls)
        dice_sum += S(1) - (S(2) * inter[cls] + S(1)) / (psum[cls] + ysum[cls] + S(1));
    v.aux = dice_sum / S(c);
    v.total = v.ce + v.aux;

    if (d_logits) {
        Tensor<S> d_probs(probs.dims());
        for (std::size_t cls = 0; cls < c; ++cls) {
            const S num = S(2) * inter[cls] + S(1);
            const S den = psum[cls] + ysum[cls] + S(1);
            for (std::size_t n = 0; n < b; ++n) {
                const std::uint8_t* t = target.data() + n * hw;
                S* dp = d_probs.data() + (n * c + cls) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const S y = t[i] == cls ? S(1) : S(0);
                    // d/dp of (1 - num/den), averaged over classes
                    dp[i] = (num / (den * den) - S(2) * y / den) / S(c);
                }
            }
        }
        detail::softmax_backward_add(probs, d_probs, *d_logits);
    }
    return v;
}

template <class S>
LossValue<S> loss_forward(LossKind kind, const Tensor<S>& logits,
                          const Tensor<std::uint8_t>& target,
                          Tensor<S>* d_logits = nullptr) {
    return kind == LossKind::kRmi ? rmi_loss(logits, target, d_logits)
                                  : ce_dice_loss(logits, target, d_logits);
}

}  // namespace lungquant::train

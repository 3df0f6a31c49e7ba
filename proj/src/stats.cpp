#include "lungquant/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lungquant/core/errors.hpp"

namespace lungquant::stats {

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = std::numeric_limits<double>::epsilon();
    constexpr double kTiny = 1e-300;

    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

double mean_of(const std::vector<double>& xs) {
    return std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
}

}  // namespace

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double ibeta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                      a * std::log(x) + b * std::log1p(-x);
    double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double nu) {
    if (!std::isfinite(t)) return 0.0;
    return ibeta(nu / 2.0, 0.5, nu / (nu + t * t));
}

std::vector<double> average_ranks(const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        double r = 0.5 * double(i + j) + 1.0;  // mean of 1-based positions i..j
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

Spearman spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw DataError("spearman: length mismatch");
    const std::size_t n = xs.size();
    if (n < 3) throw DataError("spearman: need at least 3 pairs");

    auto rx = average_ranks(xs);
    auto ry = average_ranks(ys);
    double mx = mean_of(rx), my = mean_of(ry);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = rx[i] - mx, dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw DataError("spearman: constant input, correlation undefined");
    double rho = sxy / std::sqrt(sxx * syy);
    rho = std::clamp(rho, -1.0, 1.0);

    double nu = double(n - 2);
    double p;
    if (std::fabs(rho) == 1.0) {
        p = 0.0;
    } else {
        double t = rho * std::sqrt(nu / (1.0 - rho * rho));
        p = student_t_two_sided_p(t, nu);
    }
    return {rho, p};
}

BlandAltman bland_altman(const std::vector<double>& xs,
                         const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw DataError("bland-altman: length mismatch");
    const std::size_t n = xs.size();
    if (n < 2) throw DataError("bland-altman: need at least 2 pairs");

    BlandAltman out;
    out.points.reserve(n);
    std::vector<double> diffs(n);
    for (std::size_t i = 0; i < n; ++i) {
        diffs[i] = xs[i] - ys[i];
        out.points.emplace_back(0.5 * (xs[i] + ys[i]), diffs[i]);
    }
    out.bias = mean_of(diffs);
    double ss = 0;
    for (double d : diffs) ss += (d - out.bias) * (d - out.bias);
    double sd = std::sqrt(ss / double(n - 1));
    out.loa_low = out.bias - 1.96 * sd;
    out.loa_high = out.bias + 1.96 * sd;
    return out;
}

double wilcoxon_signed_rank(const std::vector<double>& xs,
                            const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw DataError("wilcoxon: length mismatch");
    std::vector<double> abs_d;
    std::vector<bool> pos;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double d = xs[i] - ys[i];
        if (d == 0.0) continue;  // zero-difference exclusion
        abs_d.push_back(std::fabs(d));
        pos.push_back(d > 0.0);
    }
    const std::size_t n = abs_d.size();
    if (n == 0) throw DataError("wilcoxon: all differences are zero");

    auto ranks = average_ranks(abs_d);
    double w_pos = 0, w_total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        w_total += ranks[i];
        if (pos[i]) w_pos += ranks[i];
    }
    double w_small = std::min(w_pos, w_total - w_pos);

    if (n <= 25) {
        // exact tail over all 2^n sign assignments; average ranks are
        // half-integers, so count subset sums over 2*rank
        std::vector<long> r2(n);
        long total2 = 0;
        for (std::size_t i = 0; i < n; ++i) {
            r2[i] = std::lround(2.0 * ranks[i]);
            total2 += r2[i];
        }
        std::vector<double> ways(std::size_t(total2) + 1, 0.0);
        ways[0] = 1.0;
        long reach = 0;
        for (std::size_t i = 0; i < n; ++i) {
            reach += r2[i];
            for (long s = reach; s >= r2[i]; --s) ways[s] += ways[s - r2[i]];
        }
        long w2 = std::lround(2.0 * w_small);
        double tail = 0;
        for (long s = 0; s <= w2; ++s) tail += ways[s];
        double p = 2.0 * tail / std::ldexp(1.0, int(n));
        return std::min(1.0, p);
    }

    double mean = w_total / 2.0;
    double var = 0;
    for (double r : ranks) var += r * r;
    var /= 4.0;
    double z = (w_small - mean + 0.5) / std::sqrt(var);  // continuity correction
    return std::min(1.0, 2.0 * normal_cdf(z));
}

MeanSd mean_sd(const std::vector<double>& xs) {
    MeanSd out;
    if (xs.empty()) return out;
    out.mean = mean_of(xs);
    if (xs.size() >= 2) {
        double ss = 0;
        for (double x : xs) ss += (x - out.mean) * (x - out.mean);
        out.has_sd = true;
        out.sd = std::sqrt(ss / double(xs.size() - 1));
    }
    return out;
}

}  // namespace lungquant::stats

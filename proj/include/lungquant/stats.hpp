#pragma once

#include <cstddef>
#include <utility>
#include <vector>

namespace lungquant::stats {

// Phi(z), standard normal CDF.
double normal_cdf(double z);

// Regularized incomplete beta I_x(a,b).
double ibeta(double a, double b, double x);

// Two-sided p for a Student-t statistic with nu degrees of freedom.
double student_t_two_sided_p(double t, double nu);

// Average ranks (1-based, ties share the mean of their positions).
std::vector<double> average_ranks(const std::vector<double>& xs);

// Spearman rank correlation with average ranks and the t-approximation for p.
// Requires n >= 3 and non-constant inputs.
struct Spearman {
    double rho;
    double p;
};
Spearman spearman(const std::vector<double>& xs, const std::vector<double>& ys);

// Bland-Altman agreement: diffs = xs - ys, bias = mean(diffs), limits of
// agreement = bias +/- 1.96 * sample sd. Requires n >= 2.
struct BlandAltman {
    double bias;
    double loa_low;
    double loa_high;
    std::vector<std::pair<double, double>> points;  // (pair mean, pair diff)
};
BlandAltman bland_altman(const std::vector<double>& xs, const std::vector<double>& ys);

// Paired Wilcoxon signed-rank two-sided p. Zero differences are dropped,
// tied |differences| get average ranks; exact tie-aware distribution for
// n <= 25, else normal approximation with continuity correction and
// Var = sum(rank^2)/4. Errors when every difference is zero.
double wilcoxon_signed_rank(const std::vector<double>& xs,
                            const std::vector<double>& ys);

// mean and (n-1) sample sd; sd absent for n < 2
struct MeanSd {
    double mean = 0;
    bool has_sd = false;
    double sd = 0;
};
MeanSd mean_sd(const std::vector<double>& xs);

}  // namespace lungquant::stats

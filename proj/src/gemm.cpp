#include "lungquant/core/gemm.hpp"

#include <atomic>
#include <cstdlib>
#include <vector>

#ifdef LUNGQUANT_HAVE_OPENBLAS
#include <cblas.h>
#endif

namespace lungquant {

namespace {

std::atomic<bool> g_accelerated{true};

// Parallelism lives at the batch level; a threaded BLAS underneath would
// oversubscribe and make reduction order depend on its scheduler.
struct BlasSingleThread {
    BlasSingleThread() { ::setenv("OPENBLAS_NUM_THREADS", "1", 0); }
} g_blas_single_thread;

// Reference kernel: transpose-normalized then ikj loop. Adequate for the
// portable device class and as a no-BLAS fallback.
template <class S>
void gemm_naive(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                S alpha, const S* a, std::size_t lda, const S* b, std::size_t ldb,
                S beta, S* c, std::size_t ldc) {
    auto A = [&](std::size_t i, std::size_t p) { return trans_a ? a[p * lda + i] : a[i * lda + p]; };
    auto B = [&](std::size_t p, std::size_t j) { return trans_b ? b[j * ldb + p] : b[p * ldb + j]; };
    for (std::size_t i = 0; i < m; ++i) {
        S* row = c + i * ldc;
        if (beta == S(0)) {
            for (std::size_t j = 0; j < n; ++j) row[j] = S(0);
        } else if (beta != S(1)) {
            for (std::size_t j = 0; j < n; ++j) row[j] *= beta;
        }
        for (std::size_t p = 0; p < k; ++p) {
            S av = alpha * A(i, p);
            if (av == S(0)) continue;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * B(p, j);
        }
    }
}

}  // namespace

bool gemm_backend_accelerated() { return g_accelerated.load(); }
void set_gemm_backend_accelerated(bool on) { g_accelerated.store(on); }

bool gemm_has_blas() {
#ifdef LUNGQUANT_HAVE_OPENBLAS
    return true;
#else
    return false;
#endif
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          float alpha, const float* a, std::size_t lda, const float* b, std::size_t ldb,
          float beta, float* c, std::size_t ldc) {
#ifdef LUNGQUANT_HAVE_OPENBLAS
    if (g_accelerated.load()) {
        cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                    trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                    static_cast<int>(n), static_cast<int>(k), alpha, a,
                    static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
                    static_cast<int>(ldc));
        return;
    }
#endif
    gemm_naive(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double beta, double* c, std::size_t ldc) {
#ifdef LUNGQUANT_HAVE_OPENBLAS
    if (g_accelerated.load()) {
        cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                    trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                    static_cast<int>(n), static_cast<int>(k), alpha, a,
                    static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
                    static_cast<int>(ldc));
        return;
    }
#endif
    gemm_naive(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace lungquant

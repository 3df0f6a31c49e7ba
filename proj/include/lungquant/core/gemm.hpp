#pragma once

#include <cstddef>

namespace lungquant {

// C (m x n) = alpha * op(A) * op(B) + beta * C, row-major.
// Dispatches to BLAS when built with it and the accelerated backend is active;
// otherwise a plain blocked loop. The portable backend exists so the CLI's
// --device portable mode exercises a BLAS-free path.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          float alpha, const float* a, std::size_t lda, const float* b, std::size_t ldb,
          float beta, float* c, std::size_t ldc);
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double beta, double* c, std::size_t ldc);

bool gemm_backend_accelerated();
void set_gemm_backend_accelerated(bool on);
bool gemm_has_blas();

}  // namespace lungquant

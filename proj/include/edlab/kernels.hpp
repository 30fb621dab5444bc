#pragma once

#include <cstddef>

// Dense row-major matrix kernels. `parallel` variants split output rows
// across OpenMP threads; each output row is computed with the same
// instruction sequence as the single-threaded path, so results are
// bitwise independent of the thread count. `reference` holds naive
// textbook loops used only as a test oracle and benchmark baseline.
namespace edlab::kernels {

namespace parallel {

// C[m x n] = A[m x k] * B[k x n]
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n);
// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n);
// C[k x n] += A[m x k]^T * D[m x n]
void gemm_tn_acc(const float* a, const float* d, float* c, std::size_t m, std::size_t k, std::size_t n);
// C[m x k] += D[m x n] * B[k x n]^T
void gemm_nt_acc(const float* d, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n);
// out[n x m] = in[m x n]^T
void transpose(const float* in, float* out, std::size_t m, std::size_t n);

}  // namespace parallel

namespace reference {

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_tn_acc(const float* a, const float* d, float* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_nt_acc(const float* d, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n);

}  // namespace reference

// Work below this many multiply-adds stays on the calling thread.
inline constexpr std::size_t kParallelThreshold = 1u << 18;

}  // namespace edlab::kernels

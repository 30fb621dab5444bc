#include "edlab/kernels.hpp"

#include <cstring>
#include <vector>

namespace edlab::kernels {

namespace {

inline void axpy_row(float s, const float* __restrict x, float* __restrict y, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) y[j] += s * x[j];
}

inline bool worth_threading(std::size_t m, std::size_t k, std::size_t n) {
    return m > 1 && m * k * n >= kParallelThreshold;
}

}  // namespace

namespace parallel {

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    std::memset(c, 0, m * n * sizeof(float));
    gemm_acc(a, b, c, m, k, n);
}

void gemm_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (worth_threading(m, k, n))
    for (long i = 0; i < rows; ++i) {
        const float* ai = a + i * k;
        float* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const float s = ai[p];
            if (s != 0.0f) axpy_row(s, b + p * n, ci, n);
        }
    }
}

void gemm_tn_acc(const float* a, const float* d, float* c, std::size_t m, std::size_t k, std::size_t n) {
    const long out_rows = static_cast<long>(k);
#pragma omp parallel for schedule(static) if (worth_threading(k, m, n))
    for (long p = 0; p < out_rows; ++p) {
        float* cp = c + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const float s = a[i * k + p];
            if (s != 0.0f) axpy_row(s, d + i * n, cp, n);
        }
    }
}

void gemm_nt_acc(const float* d, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    // Materialize B^T so the inner loop is a contiguous axpy.
    std::vector<float> bt(k * n);
    transpose(b, bt.data(), k, n);
    gemm_acc(d, bt.data(), c, m, n, k);
}

void transpose(const float* in, float* out, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
}

}  // namespace parallel

namespace reference {

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += double(a[i * k + p]) * double(b[p * n + j]);
            c[i * n + j] = static_cast<float>(acc);
        }
}

void gemm_tn_acc(const float* a, const float* d, float* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += double(a[i * k + p]) * double(d[i * n + j]);
            c[p * n + j] += static_cast<float>(acc);
        }
}

void gemm_nt_acc(const float* d, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += double(d[i * n + j]) * double(b[p * n + j]);
            c[i * k + p] += static_cast<float>(acc);
        }
}

}  // namespace reference

}  // namespace edlab::kernels

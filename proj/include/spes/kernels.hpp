#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "spes/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Compute kernels. Each has a serial reference and an OpenMP variant that
// parallelizes over independent output rows; per-element accumulation order
// is identical in both, so results are bit-identical regardless of thread
// count. The dispatching wrappers pick the variant from a process-wide flag.
namespace spes::kernels {

inline bool& parallel_flag() {
    static bool enabled = true;
    return enabled;
}
inline void set_parallel(bool on) { parallel_flag() = on; }

// ---- matmul: C[m x n] = A[m x k] * B[k x n] ----

template <typename T>
void matmul_serial(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        for (int64_t p = 0; p < k; ++p) {
            T av = a[i * k + p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void matmul_omp(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        for (int64_t p = 0; p < k; ++p) {
            T av = a[i * k + p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void matmul(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    if (parallel_flag() && m > 1)
        matmul_omp(a, b, c, m, k, n);
    else
        matmul_serial(a, b, c, m, k, n);
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void matmul_nt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_flag() && m > 1)
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            T s = T(0);
            const T* arow = a + i * k;
            const T* brow = b + j * k;
            for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c[i * n + j] += s;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void matmul_tn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_flag() && k > 1)
    for (int64_t i = 0; i < k; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            T s = T(0);
            for (int64_t p = 0; p < m; ++p) s += a[p * k + i] * b[p * n + j];
            c[i * n + j] += s;
        }
    }
}

// ---- elementwise ----

template <typename T>
T sigmoid(T z) {
    if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
    T e = std::exp(z);
    return e / (T(1) + e);
}

template <typename T>
void silu_forward(const T* x, T* y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_flag() && n > 4096)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}

// dy/dx = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
template <typename T>
void silu_backward_acc(const T* x, const T* gy, T* gx, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_flag() && n > 4096)
    for (int64_t i = 0; i < n; ++i) {
        T s = sigmoid(x[i]);
        gx[i] += gy[i] * s * (T(1) + x[i] * (T(1) - s));
    }
}

// ---- rmsnorm over rows: y = x / sqrt(mean(x^2) + eps) * g ----

template <typename T>
void rmsnorm_forward(const T* x, const T* g, T* y, int64_t rows, int64_t d, T eps) {
#pragma omp parallel for schedule(static) if (parallel_flag() && rows > 1)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * d;
        T* yr = y + r * d;
        T ms = T(0);
        for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        T inv = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
        for (int64_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * g[j];
    }
}

template <typename T>
void rmsnorm_backward_acc(const T* x, const T* g, const T* gy, T* gx, T* gg, int64_t rows,
                          int64_t d, T eps) {
    // gg accumulation is across rows; keep it serial over rows for determinism.
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * d;
        const T* gyr = gy + r * d;
        T ms = T(0);
        for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        T m = ms / static_cast<T>(d) + eps;
        T inv = T(1) / std::sqrt(m);
        // y_j = x_j * inv * g_j; dinv/dx_k = -inv^3 * x_k / d
        T dot = T(0);
        for (int64_t j = 0; j < d; ++j) dot += gyr[j] * g[j] * xr[j];
        T coef = dot * inv * inv * inv / static_cast<T>(d);
        if (gx) {
            T* gxr = gx + r * d;
            for (int64_t j = 0; j < d; ++j) gxr[j] += gyr[j] * g[j] * inv - coef * xr[j];
        }
        if (gg)
            for (int64_t j = 0; j < d; ++j) gg[j] += gyr[j] * xr[j] * inv;
    }
}

// ---- softmax / logsumexp over rows (always max-subtracted) ----

template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static) if (parallel_flag() && rows > 1)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = y + r * cols;
        T mx = xr[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (int64_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        T inv = T(1) / sum;
        for (int64_t j = 0; j < cols; ++j) yr[j] *= inv;
    }
}

template <typename T>
void logsumexp_rows(const T* x, T* lse, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static) if (parallel_flag() && rows > 1)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T mx = xr[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (int64_t j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
        lse[r] = mx + std::log(sum);
    }
}

}  // namespace spes::kernels

#pragma once

// Dense kernels backing the tensor ops. Every kernel has two implementations:
// ppm::kernels::serial holds the plain reference loops, and the ppm::kernels
// entry points add OpenMP worksharing on top. Parallelism is only ever across
// disjoint output elements and the per-element accumulation order is fixed, so
// both paths produce bit-identical results regardless of thread count.

#include <algorithm>
#include <cmath>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ppm::kernels {

// PPM_THREADS caps substrate parallelism; unset means the OpenMP default.
inline int thread_cap() {
    static const int cap = [] {
#ifdef _OPENMP
        if (const char* env = std::getenv("PPM_THREADS")) {
            const int n = std::atoi(env);
            if (n >= 1) return n;
        }
        return omp_get_max_threads();
#else
        return 1;
#endif
    }();
    return cap;
}

// Work threshold below which the parallel entry points stay serial.
inline constexpr long long kParallelCutoff = 1 << 15;

namespace serial {

// y[g,m,n] = sum_k a[g,m,k] * b[g,k,n]
template <typename T>
void bmm_nn(const T* a, const T* b, T* y, int groups, int m, int k, int n) {
    for (int g = 0; g < groups; ++g) {
        const T* ag = a + static_cast<size_t>(g) * m * k;
        const T* bg = b + static_cast<size_t>(g) * k * n;
        T* yg = y + static_cast<size_t>(g) * m * n;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                T acc = 0;
                for (int p = 0; p < k; ++p) acc += ag[i * k + p] * bg[p * n + j];
                yg[i * n + j] = acc;
            }
        }
    }
}

// y[g,m,n] = sum_k a[g,m,k] * b[g,n,k]   (second operand transposed)
template <typename T>
void bmm_nt(const T* a, const T* b, T* y, int groups, int m, int n, int k) {
    for (int g = 0; g < groups; ++g) {
        const T* ag = a + static_cast<size_t>(g) * m * k;
        const T* bg = b + static_cast<size_t>(g) * n * k;
        T* yg = y + static_cast<size_t>(g) * m * n;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                T acc = 0;
                for (int p = 0; p < k; ++p) acc += ag[i * k + p] * bg[j * k + p];
                yg[i * n + j] = acc;
            }
        }
    }
}

// y[g,k,n] = sum_m a[g,m,k] * b[g,m,n]   (first operand transposed)
template <typename T>
void bmm_tn(const T* a, const T* b, T* y, int groups, int k, int n, int m) {
    for (int g = 0; g < groups; ++g) {
        const T* ag = a + static_cast<size_t>(g) * m * k;
        const T* bg = b + static_cast<size_t>(g) * m * n;
        T* yg = y + static_cast<size_t>(g) * k * n;
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < n; ++j) {
                T acc = 0;
                for (int p = 0; p < m; ++p) acc += ag[p * k + i] * bg[p * n + j];
                yg[i * n + j] = acc;
            }
        }
    }
}

// Row-wise stabilized softmax over the last dimension.
template <typename T>
void softmax_rows(const T* x, T* y, long long rows, int width) {
    for (long long r = 0; r < rows; ++r) {
        const T* xr = x + r * width;
        T* yr = y + r * width;
        T mx = xr[0];
        for (int i = 1; i < width; ++i) mx = std::max(mx, xr[i]);
        T denom = 0;
        for (int i = 0; i < width; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            denom += yr[i];
        }
        const T inv = T(1) / denom;
        for (int i = 0; i < width; ++i) yr[i] *= inv;
    }
}

// dx_i = y_i * (dy_i - sum_j dy_j * y_j), row-wise.
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, long long rows, int width) {
    for (long long r = 0; r < rows; ++r) {
        const T* yr = y + r * width;
        const T* dyr = dy + r * width;
        T* dxr = dx + r * width;
        T dot = 0;
        for (int i = 0; i < width; ++i) dot += dyr[i] * yr[i];
        for (int i = 0; i < width; ++i) dxr[i] += yr[i] * (dyr[i] - dot);
    }
}

// Row-wise layer norm with affine transform; also writes the per-row mean and
// reciprocal standard deviation needed by the backward pass.
template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* y, T* mean_out, T* rstd_out,
                     long long rows, int width, T eps) {
    for (long long r = 0; r < rows; ++r) {
        const T* xr = x + r * width;
        T* yr = y + r * width;
        T mean = 0;
        for (int i = 0; i < width; ++i) mean += xr[i];
        mean /= T(width);
        T var = 0;
        for (int i = 0; i < width; ++i) {
            const T d = xr[i] - mean;
            var += d * d;
        }
        var /= T(width);
        const T rstd = T(1) / std::sqrt(var + eps);
        for (int i = 0; i < width; ++i) yr[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        mean_out[r] = mean;
        rstd_out[r] = rstd;
    }
}

// tanh-approximation GELU, as used by the GPT family.
template <typename T>
void gelu(const T* x, T* y, long long n) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    for (long long i = 0; i < n; ++i) {
        const T v = x[i];
        const T inner = c * (v + T(0.044715) * v * v * v);
        y[i] = T(0.5) * v * (T(1) + std::tanh(inner));
    }
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, long long n) {
    const T c = T(0.7978845608028654);
    for (long long i = 0; i < n; ++i) {
        const T v = x[i];
        const T cube = T(0.044715) * v * v * v;
        const T inner = c * (v + cube);
        const T th = std::tanh(inner);
        const T sech2 = T(1) - th * th;
        const T local = T(0.5) * (T(1) + th) + T(0.5) * v * sech2 * c * (T(1) + T(3) * T(0.044715) * v * v);
        dx[i] += local * dy[i];
    }
}

}  // namespace serial

template <typename T>
void bmm_nn(const T* a, const T* b, T* y, int groups, int m, int k, int n) {
    const long long work = static_cast<long long>(groups) * m * k * n;
    if (work < kParallelCutoff) {
        serial::bmm_nn(a, b, y, groups, m, k, n);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_cap())
#endif
    for (int g = 0; g < groups; ++g) {
        for (int i = 0; i < m; ++i) {
            const T* ag = a + static_cast<size_t>(g) * m * k;
            const T* bg = b + static_cast<size_t>(g) * k * n;
            T* yg = y + static_cast<size_t>(g) * m * n;
            for (int j = 0; j < n; ++j) {
                T acc = 0;
                for (int p = 0; p < k; ++p) acc += ag[i * k + p] * bg[p * n + j];
                yg[i * n + j] = acc;
            }
        }
    }
}

template <typename T>
void bmm_nt(const T* a, const T* b, T* y, int groups, int m, int n, int k) {
    const long long work = static_cast<long long>(groups) * m * n * k;
    if (work < kParallelCutoff) {
        serial::bmm_nt(a, b, y, groups, m, n, k);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_cap())
#endif
    for (int g = 0; g < groups; ++g) {
        for (int i = 0; i < m; ++i) {
            const T* ag = a + static_cast<size_t>(g) * m * k;
            const T* bg = b + static_cast<size_t>(g) * n * k;
            T* yg = y + static_cast<size_t>(g) * m * n;
            for (int j = 0; j < n; ++j) {
                T acc = 0;
                for (int p = 0; p < k; ++p) acc += ag[i * k + p] * bg[j * k + p];
                yg[i * n + j] = acc;
            }
        }
    }
}

template <typename T>
void bmm_tn(const T* a, const T* b, T* y, int groups, int k, int n, int m) {
    const long long work = static_cast<long long>(groups) * k * n * m;
    if (work < kParallelCutoff) {
        serial::bmm_tn(a, b, y, groups, k, n, m);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_cap())
#endif
    for (int g = 0; g < groups; ++g) {
        for (int i = 0; i < k; ++i) {
            const T* ag = a + static_cast<size_t>(g) * m * k;
            const T* bg = b + static_cast<size_t>(g) * m * n;
            T* yg = y + static_cast<size_t>(g) * k * n;
            for (int j = 0; j < n; ++j) {
                T acc = 0;
                for (int p = 0; p < m; ++p) acc += ag[p * k + i] * bg[p * n + j];
                yg[i * n + j] = acc;
            }
        }
    }
}

template <typename T>
void softmax_rows(const T* x, T* y, long long rows, int width) {
    if (rows * width < kParallelCutoff) {
        serial::softmax_rows(x, y, rows, width);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_cap())
#endif
    for (long long r = 0; r < rows; ++r) serial::softmax_rows(x + r * width, y + r * width, 1, width);
}

template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, long long rows, int width) {
    if (rows * width < kParallelCutoff) {
        serial::softmax_rows_backward(y, dy, dx, rows, width);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_cap())
#endif
    for (long long r = 0; r < rows; ++r)
        serial::softmax_rows_backward(y + r * width, dy + r * width, dx + r * width, 1, width);
}

template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* y, T* mean_out, T* rstd_out,
                     long long rows, int width, T eps) {
    if (rows * width < kParallelCutoff) {
        serial::layer_norm_rows(x, gain, bias, y, mean_out, rstd_out, rows, width, eps);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_cap())
#endif
    for (long long r = 0; r < rows; ++r)
        serial::layer_norm_rows(x + r * width, gain, bias, y + r * width, mean_out + r, rstd_out + r,
                                1, width, eps);
}

template <typename T>
void gelu(const T* x, T* y, long long n) {
    if (n < kParallelCutoff) {
        serial::gelu(x, y, n);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_cap())
#endif
    for (long long i = 0; i < n; ++i) serial::gelu(x + i, y + i, 1);
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, long long n) {
    if (n < kParallelCutoff) {
        serial::gelu_backward(x, dy, dx, n);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_cap())
#endif
    for (long long i = 0; i < n; ++i) serial::gelu_backward(x + i, dy + i, dx + i, 1);
}

}  // namespace ppm::kernels

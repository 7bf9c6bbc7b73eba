#include <immintrin.h>

#include <cstring>
#include <type_traits>

#include "gram/kernels.hpp"

// AVX2/FMA variants. gemm_nn carries the training hot path (im2col
// convolutions and the dense projections), so it gets a register-blocked
// microkernel; the rest are straightforward wide loops with scalar tails.

namespace gram::kern::avx2 {

namespace {

inline float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_hadd_ps(lo, lo);
    lo = _mm_hadd_ps(lo, lo);
    return _mm_cvtss_f32(lo);
}

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    lo = _mm_add_pd(lo, _mm_unpackhi_pd(lo, lo));
    return _mm_cvtsd_f64(lo);
}

// Plain edge loop for the tile remainders of gemm_nn.
template <class T>
void nn_edge(size_t i0, size_t i1, size_t j0, size_t j1, size_t k,
             const T* a, const T* b, T* c, size_t n) {
    for (size_t i = i0; i < i1; ++i) {
        for (size_t l = 0; l < k; ++l) {
            const T av = a[i * k + l];
            const T* brow = b + l * n;
            T* crow = c + i * n;
            for (size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
    }
}

// 6x16 f32 microkernel: 12 accumulator registers, B rows streamed once per
// k step, A elements broadcast.
void gemm_nn_f32(size_t m, size_t n, size_t k, const float* a, const float* b, float* c, bool acc) {
    if (!acc) std::memset(c, 0, m * n * sizeof(float));
    constexpr size_t MR = 6, NR = 16;
    size_t i = 0;
    for (; i + MR <= m; i += MR) {
        size_t j = 0;
        for (; j + NR <= n; j += NR) {
            __m256 acc0[MR], acc1[MR];
            for (size_t r = 0; r < MR; ++r) {
                acc0[r] = _mm256_setzero_ps();
                acc1[r] = _mm256_setzero_ps();
            }
            for (size_t l = 0; l < k; ++l) {
                const __m256 b0 = _mm256_loadu_ps(b + l * n + j);
                const __m256 b1 = _mm256_loadu_ps(b + l * n + j + 8);
                for (size_t r = 0; r < MR; ++r) {
                    const __m256 av = _mm256_set1_ps(a[(i + r) * k + l]);
                    acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
                    acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
                }
            }
            for (size_t r = 0; r < MR; ++r) {
                float* crow = c + (i + r) * n + j;
                _mm256_storeu_ps(crow, _mm256_add_ps(_mm256_loadu_ps(crow), acc0[r]));
                _mm256_storeu_ps(crow + 8, _mm256_add_ps(_mm256_loadu_ps(crow + 8), acc1[r]));
            }
        }
        if (j < n) nn_edge(i, i + MR, j, n, k, a, b, c, n);
    }
    if (i < m) nn_edge(i, m, size_t(0), n, k, a, b, c, n);
}

// 4x8 f64 microkernel, same layout.
void gemm_nn_f64(size_t m, size_t n, size_t k, const double* a, const double* b, double* c, bool acc) {
    if (!acc) std::memset(c, 0, m * n * sizeof(double));
    constexpr size_t MR = 4, NR = 8;
    size_t i = 0;
    for (; i + MR <= m; i += MR) {
        size_t j = 0;
        for (; j + NR <= n; j += NR) {
            __m256d acc0[MR], acc1[MR];
            for (size_t r = 0; r < MR; ++r) {
                acc0[r] = _mm256_setzero_pd();
                acc1[r] = _mm256_setzero_pd();
            }
            for (size_t l = 0; l < k; ++l) {
                const __m256d b0 = _mm256_loadu_pd(b + l * n + j);
                const __m256d b1 = _mm256_loadu_pd(b + l * n + j + 4);
                for (size_t r = 0; r < MR; ++r) {
                    const __m256d av = _mm256_set1_pd(a[(i + r) * k + l]);
                    acc0[r] = _mm256_fmadd_pd(av, b0, acc0[r]);
                    acc1[r] = _mm256_fmadd_pd(av, b1, acc1[r]);
                }
            }
            for (size_t r = 0; r < MR; ++r) {
                double* crow = c + (i + r) * n + j;
                _mm256_storeu_pd(crow, _mm256_add_pd(_mm256_loadu_pd(crow), acc0[r]));
                _mm256_storeu_pd(crow + 4, _mm256_add_pd(_mm256_loadu_pd(crow + 4), acc1[r]));
            }
        }
        if (j < n) nn_edge(i, i + MR, j, n, k, a, b, c, n);
    }
    if (i < m) nn_edge(i, m, size_t(0), n, k, a, b, c, n);
}

void gemm_nt_f32(size_t m, size_t n, size_t k, const float* a, const float* b, float* c, bool acc) {
    const size_t kv = k & ~size_t(7);
    for (size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        size_t j = 0;
        for (; j + 4 <= n; j += 4) {
            __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
            __m256 s2 = _mm256_setzero_ps(), s3 = _mm256_setzero_ps();
            const float* b0 = b + (j + 0) * k;
            const float* b1 = b + (j + 1) * k;
            const float* b2 = b + (j + 2) * k;
            const float* b3 = b + (j + 3) * k;
            for (size_t l = 0; l < kv; l += 8) {
                const __m256 av = _mm256_loadu_ps(arow + l);
                s0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b0 + l), s0);
                s1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b1 + l), s1);
                s2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b2 + l), s2);
                s3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b3 + l), s3);
            }
            float r0 = hsum(s0), r1 = hsum(s1), r2 = hsum(s2), r3 = hsum(s3);
            for (size_t l = kv; l < k; ++l) {
                r0 += arow[l] * b0[l];
                r1 += arow[l] * b1[l];
                r2 += arow[l] * b2[l];
                r3 += arow[l] * b3[l];
            }
            float* crow = c + i * n + j;
            if (acc) {
                crow[0] += r0; crow[1] += r1; crow[2] += r2; crow[3] += r3;
            } else {
                crow[0] = r0; crow[1] = r1; crow[2] = r2; crow[3] = r3;
            }
        }
        for (; j < n; ++j) {
            const float* brow = b + j * k;
            __m256 s = _mm256_setzero_ps();
            for (size_t l = 0; l < kv; l += 8)
                s = _mm256_fmadd_ps(_mm256_loadu_ps(arow + l), _mm256_loadu_ps(brow + l), s);
            float r = hsum(s);
            for (size_t l = kv; l < k; ++l) r += arow[l] * brow[l];
            c[i * n + j] = acc ? c[i * n + j] + r : r;
        }
    }
}

void gemm_nt_f64(size_t m, size_t n, size_t k, const double* a, const double* b, double* c, bool acc) {
    const size_t kv = k & ~size_t(3);
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            __m256d s = _mm256_setzero_pd();
            for (size_t l = 0; l < kv; l += 4)
                s = _mm256_fmadd_pd(_mm256_loadu_pd(arow + l), _mm256_loadu_pd(brow + l), s);
            double r = hsum(s);
            for (size_t l = kv; l < k; ++l) r += arow[l] * brow[l];
            c[i * n + j] = acc ? c[i * n + j] + r : r;
        }
    }
}

template <class T>
void gemm_tn_generic(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);

template <>
void gemm_tn_generic<float>(size_t m, size_t n, size_t k, const float* a, const float* b, float* c, bool acc) {
    if (!acc) std::memset(c, 0, m * n * sizeof(float));
    const size_t nv = n & ~size_t(7);
    for (size_t l = 0; l < k; ++l) {
        const float* arow = a + l * m;
        const float* brow = b + l * n;
        for (size_t i = 0; i < m; ++i) {
            const float av = arow[i];
            if (av == 0.0f) continue;
            float* crow = c + i * n;
            const __m256 avv = _mm256_set1_ps(av);
            size_t j = 0;
            for (; j < nv; j += 8)
                _mm256_storeu_ps(crow + j, _mm256_fmadd_ps(avv, _mm256_loadu_ps(brow + j), _mm256_loadu_ps(crow + j)));
            for (; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <>
void gemm_tn_generic<double>(size_t m, size_t n, size_t k, const double* a, const double* b, double* c, bool acc) {
    if (!acc) std::memset(c, 0, m * n * sizeof(double));
    const size_t nv = n & ~size_t(3);
    for (size_t l = 0; l < k; ++l) {
        const double* arow = a + l * m;
        const double* brow = b + l * n;
        for (size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            const __m256d avv = _mm256_set1_pd(av);
            size_t j = 0;
            for (; j < nv; j += 4)
                _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(avv, _mm256_loadu_pd(brow + j), _mm256_loadu_pd(crow + j)));
            for (; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

template <class T>
void gemm_nn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc) {
    if constexpr (std::is_same_v<T, float>)
        gemm_nn_f32(m, n, k, a, b, c, acc);
    else
        gemm_nn_f64(m, n, k, a, b, c, acc);
}

template <class T>
void gemm_nt(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc) {
    if constexpr (std::is_same_v<T, float>)
        gemm_nt_f32(m, n, k, a, b, c, acc);
    else
        gemm_nt_f64(m, n, k, a, b, c, acc);
}

template <class T>
void gemm_tn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc) {
    gemm_tn_generic<T>(m, n, k, a, b, c, acc);
}

template <class T>
void add(size_t n, const T* a, const T* b, T* out) {
    size_t i = 0;
    if constexpr (std::is_same_v<T, float>) {
        for (; i + 8 <= n; i += 8)
            _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    } else {
        for (; i + 4 <= n; i += 4)
            _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

template <class T>
void mul(size_t n, const T* a, const T* b, T* out) {
    size_t i = 0;
    if constexpr (std::is_same_v<T, float>) {
        for (; i + 8 <= n; i += 8)
            _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    } else {
        for (; i + 4 <= n; i += 4)
            _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

template <class T>
void scale(size_t n, T alpha, const T* x, T* out) {
    size_t i = 0;
    if constexpr (std::is_same_v<T, float>) {
        const __m256 av = _mm256_set1_ps(alpha);
        for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
    } else {
        const __m256d av = _mm256_set1_pd(alpha);
        for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
    }
    for (; i < n; ++i) out[i] = alpha * x[i];
}

template <class T>
void axpy(size_t n, T alpha, const T* x, T* y) {
    size_t i = 0;
    if constexpr (std::is_same_v<T, float>) {
        const __m256 av = _mm256_set1_ps(alpha);
        for (; i + 8 <= n; i += 8)
            _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    } else {
        const __m256d av = _mm256_set1_pd(alpha);
        for (; i + 4 <= n; i += 4)
            _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void relu(size_t n, const T* x, T* out) {
    size_t i = 0;
    if constexpr (std::is_same_v<T, float>) {
        const __m256 zero = _mm256_setzero_ps();
        for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, _mm256_max_ps(zero, _mm256_loadu_ps(x + i)));
    } else {
        const __m256d zero = _mm256_setzero_pd();
        for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_max_pd(zero, _mm256_loadu_pd(x + i)));
    }
    for (; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_bwd(size_t n, const T* x, const T* dy, T* dx) {
    size_t i = 0;
    if constexpr (std::is_same_v<T, float>) {
        const __m256 zero = _mm256_setzero_ps();
        for (; i + 8 <= n; i += 8) {
            const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
            const __m256 gated = _mm256_and_ps(mask, _mm256_loadu_ps(dy + i));
            _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), gated));
        }
    } else {
        const __m256d zero = _mm256_setzero_pd();
        for (; i + 4 <= n; i += 4) {
            const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
            const __m256d gated = _mm256_and_pd(mask, _mm256_loadu_pd(dy + i));
            _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), gated));
        }
    }
    for (; i < n; ++i)
        if (x[i] > T(0)) dx[i] += dy[i];
}

template <class T>
T sum(size_t n, const T* x) {
    size_t i = 0;
    T tail = 0;
    if constexpr (std::is_same_v<T, float>) {
        __m256 s = _mm256_setzero_ps();
        for (; i + 8 <= n; i += 8) s = _mm256_add_ps(s, _mm256_loadu_ps(x + i));
        tail = hsum(s);
    } else {
        __m256d s = _mm256_setzero_pd();
        for (; i + 4 <= n; i += 4) s = _mm256_add_pd(s, _mm256_loadu_pd(x + i));
        tail = hsum(s);
    }
    for (; i < n; ++i) tail += x[i];
    return tail;
}

template <class T>
T dot(size_t n, const T* a, const T* b) {
    size_t i = 0;
    T tail = 0;
    if constexpr (std::is_same_v<T, float>) {
        __m256 s = _mm256_setzero_ps();
        for (; i + 8 <= n; i += 8)
            s = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s);
        tail = hsum(s);
    } else {
        __m256d s = _mm256_setzero_pd();
        for (; i + 4 <= n; i += 4)
            s = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s);
        tail = hsum(s);
    }
    for (; i < n; ++i) tail += a[i] * b[i];
    return tail;
}

#define GRAMNET_INSTANTIATE(T)                                                        \
    template void gemm_nn<T>(size_t, size_t, size_t, const T*, const T*, T*, bool);   \
    template void gemm_nt<T>(size_t, size_t, size_t, const T*, const T*, T*, bool);   \
    template void gemm_tn<T>(size_t, size_t, size_t, const T*, const T*, T*, bool);   \
    template void add<T>(size_t, const T*, const T*, T*);                             \
    template void mul<T>(size_t, const T*, const T*, T*);                             \
    template void scale<T>(size_t, T, const T*, T*);                                  \
    template void axpy<T>(size_t, T, const T*, T*);                                   \
    template void relu<T>(size_t, const T*, T*);                                      \
    template void relu_bwd<T>(size_t, const T*, const T*, T*);                        \
    template T sum<T>(size_t, const T*);                                              \
    template T dot<T>(size_t, const T*, const T*);

GRAMNET_INSTANTIATE(float)
GRAMNET_INSTANTIATE(double)
#undef GRAMNET_INSTANTIATE

}  // namespace gram::kern::avx2

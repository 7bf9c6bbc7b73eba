#include "gram/kernels.hpp"

#include <cstring>

namespace gram::kern::scalar {

template <class T>
void gemm_nn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc) {
    if (!acc) std::memset(c, 0, m * n * sizeof(T));
    for (size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (size_t l = 0; l < k; ++l) {
            const T av = a[i * k + l];
            const T* brow = b + l * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class T>
void gemm_nt(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T s = 0;
            for (size_t l = 0; l < k; ++l) s += arow[l] * brow[l];
            c[i * n + j] = acc ? c[i * n + j] + s : s;
        }
    }
}

template <class T>
void gemm_tn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc) {
    if (!acc) std::memset(c, 0, m * n * sizeof(T));
    for (size_t l = 0; l < k; ++l) {
        const T* arow = a + l * m;
        const T* brow = b + l * n;
        for (size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class T>
void add(size_t n, const T* a, const T* b, T* out) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <class T>
void mul(size_t n, const T* a, const T* b, T* out) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <class T>
void scale(size_t n, T alpha, const T* x, T* out) {
    for (size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <class T>
void axpy(size_t n, T alpha, const T* x, T* y) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void relu(size_t n, const T* x, T* out) {
    for (size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_bwd(size_t n, const T* x, const T* dy, T* dx) {
    for (size_t i = 0; i < n; ++i)
        if (x[i] > T(0)) dx[i] += dy[i];
}

template <class T>
T sum(size_t n, const T* x) {
    T s = 0;
    for (size_t i = 0; i < n; ++i) s += x[i];
    return s;
}

template <class T>
T dot(size_t n, const T* a, const T* b) {
    T s = 0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
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

}  // namespace gram::kern::scalar

#include <cstdlib>
#include <cstring>
#include <string>

#include "gram/error.hpp"
#include "gram/kernels.hpp"

namespace gram::kern {

namespace {

Isa g_isa = Isa::scalar;
bool g_resolved = false;

Isa resolve() {
    const char* env = std::getenv("GRAM_KERNELS");
    if (env != nullptr) {
        if (std::strcmp(env, "scalar") == 0) return Isa::scalar;
        if (std::strcmp(env, "avx2") == 0) {
            if (!avx2_supported())
                throw ConfigError("GRAM_KERNELS=avx2 but AVX2 is not available on this CPU/build");
            return Isa::avx2;
        }
        throw ConfigError(std::string("unknown GRAM_KERNELS value: ") + env);
    }
    return avx2_supported() ? Isa::avx2 : Isa::scalar;
}

}  // namespace

const char* isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar: return "scalar";
        case Isa::avx2: return "avx2";
    }
    return "?";
}

bool avx2_supported() {
#ifdef GRAMNET_HAVE_AVX2
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Isa active() {
    if (!g_resolved) {
        g_isa = resolve();
        g_resolved = true;
    }
    return g_isa;
}

void force(Isa isa) {
    if (isa == Isa::avx2 && !avx2_supported())
        throw ConfigError("cannot force avx2 kernels: unsupported on this CPU/build");
    g_isa = isa;
    g_resolved = true;
}

#ifdef GRAMNET_HAVE_AVX2
#define GRAMNET_DISPATCH(call_scalar, call_avx2) \
    if (active() == Isa::avx2) {                 \
        call_avx2;                               \
    } else {                                     \
        call_scalar;                             \
    }
#else
#define GRAMNET_DISPATCH(call_scalar, call_avx2) call_scalar;
#endif

template <class T>
void gemm_nn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc) {
    GRAMNET_DISPATCH(scalar::gemm_nn(m, n, k, a, b, c, acc), avx2::gemm_nn(m, n, k, a, b, c, acc))
}

template <class T>
void gemm_nt(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc) {
    GRAMNET_DISPATCH(scalar::gemm_nt(m, n, k, a, b, c, acc), avx2::gemm_nt(m, n, k, a, b, c, acc))
}

template <class T>
void gemm_tn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc) {
    GRAMNET_DISPATCH(scalar::gemm_tn(m, n, k, a, b, c, acc), avx2::gemm_tn(m, n, k, a, b, c, acc))
}

template <class T>
void add(size_t n, const T* a, const T* b, T* out) {
    GRAMNET_DISPATCH(scalar::add(n, a, b, out), avx2::add(n, a, b, out))
}

template <class T>
void mul(size_t n, const T* a, const T* b, T* out) {
    GRAMNET_DISPATCH(scalar::mul(n, a, b, out), avx2::mul(n, a, b, out))
}

template <class T>
void scale(size_t n, T alpha, const T* x, T* out) {
    GRAMNET_DISPATCH(scalar::scale(n, alpha, x, out), avx2::scale(n, alpha, x, out))
}

template <class T>
void axpy(size_t n, T alpha, const T* x, T* y) {
    GRAMNET_DISPATCH(scalar::axpy(n, alpha, x, y), avx2::axpy(n, alpha, x, y))
}

template <class T>
void relu(size_t n, const T* x, T* out) {
    GRAMNET_DISPATCH(scalar::relu(n, x, out), avx2::relu(n, x, out))
}

template <class T>
void relu_bwd(size_t n, const T* x, const T* dy, T* dx) {
    GRAMNET_DISPATCH(scalar::relu_bwd(n, x, dy, dx), avx2::relu_bwd(n, x, dy, dx))
}

template <class T>
T sum(size_t n, const T* x) {
    GRAMNET_DISPATCH(return scalar::sum(n, x), return avx2::sum(n, x))
}

template <class T>
T dot(size_t n, const T* a, const T* b) {
    GRAMNET_DISPATCH(return scalar::dot(n, a, b), return avx2::dot(n, a, b))
}

#undef GRAMNET_DISPATCH

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

}  // namespace gram::kern

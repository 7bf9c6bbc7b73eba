#pragma once

#include <cstddef>

// Arithmetic inner loops behind the tensor ops. Every kernel has a scalar
// reference implementation and, on x86, an AVX2 variant; the dispatching
// entry points pick one at runtime (overridable through force() or the
// GRAM_KERNELS environment variable). The two paths are equivalence-tested
// against each other in tests/test_kernels.cpp.
//
// All matrices are row-major and contiguous.
//   gemm_nn: C[m x n] (+)= A[m x k] * B[k x n]
//   gemm_nt: C[m x n] (+)= A[m x k] * B[n x k]^T
//   gemm_tn: C[m x n] (+)= A[k x m]^T * B[k x n]
// `acc` selects accumulate (+=) versus overwrite (=).

namespace gram::kern {

enum class Isa { scalar, avx2 };

const char* isa_name(Isa isa);
bool avx2_supported();

// Currently selected instruction set. First call resolves it from CPU
// capabilities and the GRAM_KERNELS environment variable (values: "scalar",
// "avx2"); the selection then stays fixed so runs are deterministic.
Isa active();

// Override the selection (tests). Throws ConfigError if unsupported.
void force(Isa isa);

template <class T> void gemm_nn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);
template <class T> void gemm_nt(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);
template <class T> void gemm_tn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);

template <class T> void add(size_t n, const T* a, const T* b, T* out);
template <class T> void mul(size_t n, const T* a, const T* b, T* out);
template <class T> void scale(size_t n, T alpha, const T* x, T* out);
template <class T> void axpy(size_t n, T alpha, const T* x, T* y);  // y += alpha * x
template <class T> void relu(size_t n, const T* x, T* out);
template <class T> void relu_bwd(size_t n, const T* x, const T* dy, T* dx);  // dx += dy * (x > 0)
template <class T> T sum(size_t n, const T* x);
template <class T> T dot(size_t n, const T* a, const T* b);

namespace scalar {
template <class T> void gemm_nn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);
template <class T> void gemm_nt(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);
template <class T> void gemm_tn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);
template <class T> void add(size_t n, const T* a, const T* b, T* out);
template <class T> void mul(size_t n, const T* a, const T* b, T* out);
template <class T> void scale(size_t n, T alpha, const T* x, T* out);
template <class T> void axpy(size_t n, T alpha, const T* x, T* y);
template <class T> void relu(size_t n, const T* x, T* out);
template <class T> void relu_bwd(size_t n, const T* x, const T* dy, T* dx);
template <class T> T sum(size_t n, const T* x);
template <class T> T dot(size_t n, const T* a, const T* b);
}  // namespace scalar

#ifdef GRAMNET_HAVE_AVX2
namespace avx2 {
template <class T> void gemm_nn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);
template <class T> void gemm_nt(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);
template <class T> void gemm_tn(size_t m, size_t n, size_t k, const T* a, const T* b, T* c, bool acc);
template <class T> void add(size_t n, const T* a, const T* b, T* out);
template <class T> void mul(size_t n, const T* a, const T* b, T* out);
template <class T> void scale(size_t n, T alpha, const T* x, T* out);
template <class T> void axpy(size_t n, T alpha, const T* x, T* y);
template <class T> void relu(size_t n, const T* x, T* out);
template <class T> void relu_bwd(size_t n, const T* x, const T* dy, T* dx);
template <class T> T sum(size_t n, const T* x);
template <class T> T dot(size_t n, const T* a, const T* b);
}  // namespace avx2
#endif

}  // namespace gram::kern

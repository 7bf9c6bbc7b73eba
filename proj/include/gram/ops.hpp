#pragma once

#include <type_traits>
#include <vector>

#include "gram/tensor.hpp"

// Differentiable ops over TensorT. Every op takes the tape last; passing
// nullptr runs a pure forward with no gradient bookkeeping (inference).
// Gradients accumulate additively, so fan-out works without extra nodes.

namespace gram {

inline constexpr double kLogEps = 1e-12;  // clamp inside log()

enum class BnMode { train, eval };

// Running batch-norm statistics, owned by the layer that uses them.
template <class T>
struct BnStats {
    std::vector<T> mean;
    std::vector<T> var;
    bool initialized = false;
};

template <class T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, std::type_identity_t<TapeT<T>*> tape);

// x [N,C,H,W] * w [Co,C,k,k] -> [N,Co,H',W']; odd k, padding 0 or (k-1)/2.
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, size_t stride, size_t padding, std::type_identity_t<TapeT<T>*> tape);

template <class T> TensorT<T> softmax(const TensorT<T>& x, size_t axis, std::type_identity_t<TapeT<T>*> tape);

template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       BnStats<T>& stats, BnMode mode, T momentum, T eps, std::type_identity_t<TapeT<T>*> tape);

template <class T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, std::type_identity_t<TapeT<T>*> tape);
template <class T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, std::type_identity_t<TapeT<T>*> tape);
template <class T> TensorT<T> scale(const TensorT<T>& x, T alpha, std::type_identity_t<TapeT<T>*> tape);
template <class T> TensorT<T> relu(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape);
template <class T> TensorT<T> log_clamped(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape);
template <class T> TensorT<T> exp(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape);

// Views: zero-copy, participate in autodiff through shared storage.
template <class T> TensorT<T> reshape(const TensorT<T>& x, Shape shape);
template <class T> TensorT<T> vectorize(const TensorT<T>& x);

template <class T> TensorT<T> sum_all(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape);
template <class T> TensorT<T> mean_all(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape);

// Sum over the last axis: [..., D] -> [...].
template <class T> TensorT<T> sum_lastdim(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape);

template <class T> TensorT<T> global_avg_pool(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape);  // [N,C,H,W] -> [N,C]
template <class T> TensorT<T> avg_pool2d(const TensorT<T>& x, size_t factor, std::type_identity_t<TapeT<T>*> tape);

// Mean over the token axis: [N,S,D] -> [N,D].
template <class T> TensorT<T> mean_tokens(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape);

// y = x + b broadcast over rows; x [R,D], b [D].
template <class T> TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& b, std::type_identity_t<TapeT<T>*> tape);

// y[r] = x[r, labels[r]]; labels validated against [0, K).
template <class T>
TensorT<T> pick_rows(const TensorT<T>& x, const std::vector<int>& labels, std::type_identity_t<TapeT<T>*> tape);

template <class T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps,
                     std::type_identity_t<TapeT<T>*> tape);

// Append one token per instance: x [N,S,D], t [N,D] -> [N,S+1,D].
template <class T>
TensorT<T> concat_token(const TensorT<T>& x, const TensorT<T>& t, std::type_identity_t<TapeT<T>*> tape);

// [N,C,H,W] -> [N,H*W,C] visual-token layout (and its inverse).
template <class T> TensorT<T> nchw_to_tokens(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape);

template <class T> TensorT<T> broadcast_row(const TensorT<T>& z, size_t n, std::type_identity_t<TapeT<T>*> tape);

// Per instance and channel group: G = Vg^T Vg, vectorized row-major and
// concatenated in group order. v [N,S,C] with C % groups == 0 ->
// [N, groups * (C/groups)^2].
template <class T>
TensorT<T> grouped_gramian(const TensorT<T>& v, size_t groups, std::type_identity_t<TapeT<T>*> tape);

// Single-query multi-head scaled dot-product attention. q [N,D] attends
// over k,v [N,S,D] with `heads` splits of D; scale 1/sqrt(D/heads).
// When probs_out is given it receives the attention weights [N,heads,S]
// (detached).
template <class T>
TensorT<T> class_attention_core(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                size_t heads, std::type_identity_t<TapeT<T>*> tape, std::type_identity_t<TensorT<T>*> probs_out = nullptr);

}  // namespace gram

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "gram/ops.hpp"
#include "gram/tensor.hpp"

namespace gram {

// gram: Gramian class token + one class-attention layer + linear classifier.
// gap_fc and learned_token exist only as ablation baselines.
enum class HeadKind { gram, gap_fc, learned_token };

const char* head_kind_name(HeadKind k);
HeadKind head_kind_from_name(const std::string& s);  // throws ConfigError

struct HeadConfig {
    HeadKind kind = HeadKind::gram;
    size_t in_channels = 64;   // feature width entering the head
    size_t reduced = 64;       // projected width feeding the Gramian
    size_t cardinality = 1;    // channel-group count for the grouped Gramian
    size_t attn_dim = 0;       // attention working width; 0 means = reduced
    size_t attn_heads = 1;
    size_t classes = 10;

    void validate() const;  // throws ConfigError
    size_t attn_width() const { return attn_dim != 0 ? attn_dim : reduced; }
    size_t group_width() const { return reduced / cardinality; }
    size_t gram_len() const { return cardinality * group_width() * group_width(); }
};

template <class T>
struct GramHeadT {
    HeadConfig cfg;
    TensorT<T> w_c;              // [C_in, reduced]
    TensorT<T> w_g;              // [gram_len, D]
    TensorT<T> w_in;             // [C_in, D] input projection when C_in != D
    TensorT<T> w_q, w_k, w_v, w_o;  // [D, D]
    TensorT<T> ln_g, ln_b;       // [D]
    TensorT<T> w_cls;            // [D, K] (gap_fc: [C_in, K])
    TensorT<T> token;            // [D], learned_token baseline only

    void visit_params(const std::function<void(const std::string&, TensorT<T>&)>& fn);
    size_t param_count();
};

template <class T>
GramHeadT<T> build_head(const HeadConfig& cfg, uint64_t seed);

// V = X W_c applied per instance; x [N,S,C_in] -> [N,S,reduced].
template <class T>
TensorT<T> project_features(const TensorT<T>& x, const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape);

// Class token from second-order statistics: project -> grouped Gramian -> W_g.
template <class T>
TensorT<T> gram_token(const TensorT<T>& x, const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape);

// One attention layer: query = token, keys/values over [x; token], then
// residual + layer norm. xproj must already be at the attention width.
template <class T>
TensorT<T> class_attention(const TensorT<T>& token, const TensorT<T>& xproj,
                           const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape,
                           std::type_identity_t<TensorT<T>*> probs_out = nullptr);

// Class embedding right before the classifier (gap_fc: the pooled features).
template <class T>
TensorT<T> head_embedding(const TensorT<T>& x, const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape,
                          std::type_identity_t<TensorT<T>*> probs_out = nullptr);

// Full head: tokens [N,S,C_in] -> logits [N,K].
template <class T>
TensorT<T> head_forward(const TensorT<T>& x, const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape,
                        std::type_identity_t<TensorT<T>*> probs_out = nullptr);

using GramHead = GramHeadT<float>;

}  // namespace gram

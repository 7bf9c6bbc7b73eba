#include "gram/head.hpp"

#include <cmath>

#include "gram/error.hpp"
#include "gram/rng.hpp"

namespace gram {

const char* head_kind_name(HeadKind k) {
    switch (k) {
        case HeadKind::gram: return "gram";
        case HeadKind::gap_fc: return "gap_fc";
        case HeadKind::learned_token: return "learned_token";
    }
    return "?";
}

HeadKind head_kind_from_name(const std::string& s) {
    if (s == "gram") return HeadKind::gram;
    if (s == "gap_fc") return HeadKind::gap_fc;
    if (s == "learned_token") return HeadKind::learned_token;
    throw ConfigError("unknown head kind '" + s + "' (gram|gap_fc|learned_token)");
}

void HeadConfig::validate() const {
    if (in_channels == 0 || classes < 2) throw ConfigError("head needs in_channels > 0, classes >= 2");
    if (kind == HeadKind::gap_fc) return;  // remaining knobs unused
    if (reduced == 0) throw ConfigError("reduced width must be positive");
    if (kind == HeadKind::gram && (cardinality == 0 || reduced % cardinality != 0))
        throw ConfigError("cardinality " + std::to_string(cardinality) +
                          " does not divide reduced width " + std::to_string(reduced));
    const size_t d = attn_width();
    if (attn_heads == 0 || d % attn_heads != 0)
        throw ConfigError("attention heads " + std::to_string(attn_heads) +
                          " do not divide attention width " + std::to_string(d));
}

namespace {

template <class T>
TensorT<T> lin(size_t rows, size_t cols, Rng& rng) {
    return TensorT<T>::randn({rows, cols}, rng, T(1.0 / std::sqrt(double(rows))), true);
}

// x [N,S,C] * w [C,E] -> [N,S,E], flattening instances through a view.
template <class T>
TensorT<T> tokens_linear(const TensorT<T>& x, const TensorT<T>& w, std::type_identity_t<TapeT<T>*> tape) {
    const size_t N = x.dim(0), S = x.dim(1);
    auto y = matmul(reshape(x, {N * S, x.dim(2)}), w, tape);
    return reshape(y, {N, S, w.dim(1)});
}

}  // namespace

template <class T>
GramHeadT<T> build_head(const HeadConfig& cfg, uint64_t seed) {
    cfg.validate();
    GramHeadT<T> h;
    h.cfg = cfg;
    Rng rng(seed);
    if (cfg.kind == HeadKind::gap_fc) {
        h.w_cls = lin<T>(cfg.in_channels, cfg.classes, rng);
        return h;
    }
    const size_t d = cfg.attn_width();
    if (cfg.kind == HeadKind::gram) {
        h.w_c = lin<T>(cfg.in_channels, cfg.reduced, rng);
        h.w_g = lin<T>(cfg.gram_len(), d, rng);
    } else {
        h.token = TensorT<T>::randn({d}, rng, T(0.02), true);
    }
    if (cfg.in_channels != d) h.w_in = lin<T>(cfg.in_channels, d, rng);
    h.w_q = lin<T>(d, d, rng);
    h.w_k = lin<T>(d, d, rng);
    h.w_v = lin<T>(d, d, rng);
    h.w_o = lin<T>(d, d, rng);
    h.ln_g = TensorT<T>::full({d}, T(1), true);
    h.ln_b = TensorT<T>::zeros({d}, true);
    h.w_cls = lin<T>(d, cfg.classes, rng);
    return h;
}

template <class T>
void GramHeadT<T>::visit_params(const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    if (cfg.kind == HeadKind::gap_fc) {
        fn("wcls", w_cls);
        return;
    }
    if (cfg.kind == HeadKind::gram) {
        fn("wc", w_c);
        fn("wg", w_g);
    } else {
        fn("tok", token);
    }
    if (w_in.defined()) fn("win", w_in);
    fn("wq", w_q);
    fn("wk", w_k);
    fn("wv", w_v);
    fn("wo", w_o);
    fn("ln.g", ln_g);
    fn("ln.b", ln_b);
    fn("wcls", w_cls);
}

template <class T>
size_t GramHeadT<T>::param_count() {
    size_t n = 0;
    visit_params([&](const std::string&, TensorT<T>& t) { n += t.numel(); });
    return n;
}

template <class T>
TensorT<T> project_features(const TensorT<T>& x, const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() != 3 || x.dim(2) != head.cfg.in_channels)
        throw DimError("head expects [NxSx" + std::to_string(head.cfg.in_channels) +
                       "] tokens, got " + shape_str(x.shape()));
    return tokens_linear(x, head.w_c, tape);
}

template <class T>
TensorT<T> gram_token(const TensorT<T>& x, const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape) {
    auto v = project_features(x, head, tape);
    auto g = grouped_gramian(v, head.cfg.cardinality, tape);
    return matmul(g, head.w_g, tape);
}

template <class T>
TensorT<T> class_attention(const TensorT<T>& token, const TensorT<T>& xproj,
                           const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape, std::type_identity_t<TensorT<T>*> probs_out) {
    const size_t d = head.cfg.attn_width();
    if (token.ndim() != 2 || token.dim(1) != d || xproj.ndim() != 3 || xproj.dim(2) != d)
        throw DimError("class_attention widths: token " + shape_str(token.shape()) + " features " +
                       shape_str(xproj.shape()) + " vs attention width " + std::to_string(d));
    auto kv = concat_token(xproj, token, tape);
    auto q = matmul(token, head.w_q, tape);
    auto k = tokens_linear(kv, head.w_k, tape);
    auto v = tokens_linear(kv, head.w_v, tape);
    auto att = class_attention_core(q, k, v, head.cfg.attn_heads, tape, probs_out);
    auto o = matmul(att, head.w_o, tape);
    return layernorm(add(token, o, tape), head.ln_g, head.ln_b, T(1e-6), tape);
}

template <class T>
TensorT<T> head_embedding(const TensorT<T>& x, const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape,
                          std::type_identity_t<TensorT<T>*> probs_out) {
    if (x.ndim() != 3 || x.dim(2) != head.cfg.in_channels)
        throw DimError("head expects [NxSx" + std::to_string(head.cfg.in_channels) +
                       "] tokens, got " + shape_str(x.shape()));
    if (head.cfg.kind == HeadKind::gap_fc) return mean_tokens(x, tape);

    TensorT<T> tok = head.cfg.kind == HeadKind::gram
                         ? gram_token(x, head, tape)
                         : broadcast_row(head.token, x.dim(0), tape);
    auto xin = head.w_in.defined() ? tokens_linear(x, head.w_in, tape) : x;
    return class_attention(tok, xin, head, tape, probs_out);
}

template <class T>
TensorT<T> head_forward(const TensorT<T>& x, const GramHeadT<T>& head, std::type_identity_t<TapeT<T>*> tape,
                        std::type_identity_t<TensorT<T>*> probs_out) {
    return matmul(head_embedding(x, head, tape, probs_out), head.w_cls, tape);
}

#define GRAMNET_INSTANTIATE_HEAD(T)                                                              \
    template struct GramHeadT<T>;                                                                \
    template GramHeadT<T> build_head<T>(const HeadConfig&, uint64_t);                            \
    template TensorT<T> project_features<T>(const TensorT<T>&, const GramHeadT<T>&, TapeT<T>*);  \
    template TensorT<T> gram_token<T>(const TensorT<T>&, const GramHeadT<T>&, TapeT<T>*);        \
    template TensorT<T> class_attention<T>(const TensorT<T>&, const TensorT<T>&,                 \
                                           const GramHeadT<T>&, TapeT<T>*, TensorT<T>*);         \
    template TensorT<T> head_embedding<T>(const TensorT<T>&, const GramHeadT<T>&, TapeT<T>*,     \
                                          TensorT<T>*);                                          \
    template TensorT<T> head_forward<T>(const TensorT<T>&, const GramHeadT<T>&, TapeT<T>*,       \
                                        TensorT<T>*);

GRAMNET_INSTANTIATE_HEAD(float)
GRAMNET_INSTANTIATE_HEAD(double)
#undef GRAMNET_INSTANTIATE_HEAD

}  // namespace gram

#include "gram/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>

#include "gram/error.hpp"
#include "gram/rng.hpp"

namespace gram {

namespace {
std::atomic<size_t> g_kd_warnings{0};
}

size_t kd_mode_warnings() { return g_kd_warnings.load(); }

void EnsembleConfig::validate() const {
    backbone.validate();
    head.validate();
    if (num_heads < 1) throw ConfigError("ensemble needs at least one head");
    const size_t final_c = backbone.stage_channels.back();
    if (head.in_channels != final_c)
        throw ConfigError("head input width " + std::to_string(head.in_channels) +
                          " != backbone output width " + std::to_string(final_c));
}

template <class T>
EnsembleT<T> build_model(const EnsembleConfig& cfg, uint64_t seed) {
    cfg.validate();
    EnsembleT<T> model;
    model.cfg = cfg;
    model.backbone = build_backbone<T>(cfg.backbone, mix_keys(seed, 0xbacc));
    for (size_t i = 0; i < cfg.num_heads; ++i)
        model.heads.push_back(build_head<T>(cfg.head, seed + i));
    return model;
}

template <class T>
void EnsembleT<T>::visit_params(const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    const bool multi = cfg.aggregate == Aggregate::multi;
    backbone.visit_params([&](const std::string& name, TensorT<T>& t) {
        if (!multi && name.rfind("agg", 0) == 0) return;  // projections idle in final mode
        fn("bb." + name, t);
    });
    for (size_t i = 0; i < heads.size(); ++i)
        heads[i].visit_params([&](const std::string& name, TensorT<T>& t) {
            fn("h" + std::to_string(i) + "." + name, t);
        });
}

template <class T>
std::vector<std::pair<std::string, TensorT<T>>> EnsembleT<T>::params() {
    std::vector<std::pair<std::string, TensorT<T>>> out;
    visit_params([&](const std::string& name, TensorT<T>& t) { out.emplace_back(name, t); });
    return out;
}

template <class T>
size_t EnsembleT<T>::param_count() {
    size_t n = 0;
    visit_params([&](const std::string&, TensorT<T>& t) { n += t.numel(); });
    return n;
}

template <class T>
PredictionSetT<T> heads_forward(EnsembleT<T>& model, const TensorT<T>& tokens, std::type_identity_t<TapeT<T>*> tape) {
    PredictionSetT<T> preds;
    for (auto& head : model.heads) {
        auto logits = head_forward(tokens, head, tape);
        preds.per_head_logits.push_back(logits);
        preds.per_head_probs.push_back(softmax(logits, 1, tape));
    }
    const size_t h = preds.per_head_probs.size();
    auto acc = preds.per_head_probs[0];
    for (size_t i = 1; i < h; ++i) acc = add(acc, preds.per_head_probs[i], tape);
    preds.mean_probs = scale(acc, T(1) / T(h), tape);
    return preds;
}

template <class T>
PredictionSetT<T> forward_all(EnsembleT<T>& model, const TensorT<T>& images, BnMode mode,
                              std::type_identity_t<TapeT<T>*> tape) {
    auto feats = backbone_forward(model.backbone, images, mode, tape);
    auto tokens = aggregate_stages(model.backbone, feats, model.cfg.aggregate, tape);
    return heads_forward(model, tokens, tape);
}

template <class T>
TensorT<T> ce_sum(const PredictionSetT<T>& preds, const std::vector<int>& labels, std::type_identity_t<TapeT<T>*> tape,
                  std::vector<T>* per_head) {
    if (preds.per_head_probs.empty()) throw ConfigError("ce_sum: no heads");
    if (per_head) per_head->clear();
    TensorT<T> total;
    for (const auto& probs : preds.per_head_probs) {
        auto picked = pick_rows(log_clamped(probs, tape), labels, tape);
        auto ce = scale(mean_all(picked, tape), T(-1), tape);
        if (per_head) per_head->push_back(ce.item());
        total = total.defined() ? add(total, ce, tape) : ce;
    }
    return total;
}

template <class T>
TensorT<T> decorrelation_loss(const PredictionSetT<T>& preds, std::type_identity_t<TapeT<T>*> tape) {
    if (preds.per_head_probs.empty()) throw ConfigError("decorrelation_loss: no heads");
    const size_t N = preds.mean_probs.dim(0);
    auto log_mean = log_clamped(preds.mean_probs, tape);
    TensorT<T> acc;
    for (const auto& probs : preds.per_head_probs) {
        auto diff = add(log_mean, scale(log_clamped(probs, tape), T(-1), tape), tape);
        auto kl = sum_all(mul(preds.mean_probs, diff, tape), tape);
        acc = acc.defined() ? add(acc, kl, tape) : kl;
    }
    return scale(acc, T(1) / T(N), tape);
}

template <class T>
LossBreakdownT<T> total_loss(const PredictionSetT<T>& preds, const std::vector<int>& labels,
                             T lambda, std::type_identity_t<TapeT<T>*> tape) {
    LossBreakdownT<T> out;
    auto ce = ce_sum(preds, labels, tape, &out.per_head_ce);
    auto dec = decorrelation_loss(preds, tape);
    out.ce_sum = ce.item();
    out.dec = dec.item();
    if (lambda > T(0)) {
        if (g_kd_warnings.fetch_add(1) == 0)
            std::fprintf(stderr,
                         "warning: positive lambda %.4g turns the decorrelation term into a "
                         "distillation-style agreement penalty\n",
                         double(lambda));
    }
    // lambda == 0 must reduce to the plain CE objective, same bits
    out.total = lambda == T(0) ? ce : add(ce, scale(dec, lambda, tape), tape);
    return out;
}

template <class T>
EnsembleT<T> prune_heads(const EnsembleT<T>& model, std::vector<size_t> keep) {
    if (keep.empty()) throw ConfigError("prune_heads: empty keep set");
    std::sort(keep.begin(), keep.end());
    keep.erase(std::unique(keep.begin(), keep.end()), keep.end());
    if (keep.back() >= model.heads.size())
        throw ConfigError("prune_heads: index " + std::to_string(keep.back()) + " out of range, " +
                          std::to_string(model.heads.size()) + " heads");
    EnsembleT<T> pruned;
    pruned.cfg = model.cfg;
    pruned.cfg.num_heads = keep.size();
    pruned.backbone = model.backbone;  // handle copies: same parameter storage
    for (size_t i : keep) pruned.heads.push_back(model.heads[i]);
    return pruned;
}

#define GRAMNET_INSTANTIATE_ENSEMBLE(T)                                                           \
    template struct EnsembleT<T>;                                                                 \
    template EnsembleT<T> build_model<T>(const EnsembleConfig&, uint64_t);                        \
    template PredictionSetT<T> forward_all<T>(EnsembleT<T>&, const TensorT<T>&, BnMode,           \
                                              TapeT<T>*);                                         \
    template PredictionSetT<T> heads_forward<T>(EnsembleT<T>&, const TensorT<T>&, TapeT<T>*);     \
    template TensorT<T> ce_sum<T>(const PredictionSetT<T>&, const std::vector<int>&, TapeT<T>*,   \
                                  std::vector<T>*);                                               \
    template TensorT<T> decorrelation_loss<T>(const PredictionSetT<T>&, TapeT<T>*);               \
    template LossBreakdownT<T> total_loss<T>(const PredictionSetT<T>&, const std::vector<int>&,   \
                                             T, TapeT<T>*);                                       \
    template EnsembleT<T> prune_heads<T>(const EnsembleT<T>&, std::vector<size_t>);

GRAMNET_INSTANTIATE_ENSEMBLE(float)
GRAMNET_INSTANTIATE_ENSEMBLE(double)
#undef GRAMNET_INSTANTIATE_ENSEMBLE

}  // namespace gram

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "gram/backbone.hpp"
#include "gram/head.hpp"

namespace gram {

struct EnsembleConfig {
    BackboneConfig backbone;
    HeadConfig head;           // shared template; per-head weights differ by seed
    size_t num_heads = 5;
    Aggregate aggregate = Aggregate::final_stage;
    double lambda = -0.8;      // < 0 decorrelates; > 0 is the distillation comparison mode

    void validate() const;  // throws ConfigError
};

template <class T>
struct EnsembleT {
    EnsembleConfig cfg;
    BackboneT<T> backbone;
    std::vector<GramHeadT<T>> heads;

    void visit_params(const std::function<void(const std::string&, TensorT<T>&)>& fn);
    std::vector<std::pair<std::string, TensorT<T>>> params();
    size_t param_count();
};

template <class T>
struct PredictionSetT {
    std::vector<TensorT<T>> per_head_logits;  // h x [N,K]
    std::vector<TensorT<T>> per_head_probs;   // h x [N,K]
    TensorT<T> mean_probs;                    // [N,K]
};

template <class T>
struct LossBreakdownT {
    TensorT<T> total;  // scalar node wired into the graph
    T ce_sum = T(0);
    T dec = T(0);
    std::vector<T> per_head_ce;
};

template <class T>
EnsembleT<T> build_model(const EnsembleConfig& cfg, uint64_t seed);

template <class T>
PredictionSetT<T> forward_all(EnsembleT<T>& model, const TensorT<T>& images, BnMode mode,
                              std::type_identity_t<TapeT<T>*> tape);

// Head predictions from precomputed aggregated tokens (one backbone pass).
template <class T>
PredictionSetT<T> heads_forward(EnsembleT<T>& model, const TensorT<T>& tokens, std::type_identity_t<TapeT<T>*> tape);

// Sum over heads of batch-mean cross-entropy against hard labels.
template <class T>
TensorT<T> ce_sum(const PredictionSetT<T>& preds, const std::vector<int>& labels, std::type_identity_t<TapeT<T>*> tape,
                  std::vector<T>* per_head = nullptr);

// Batch-mean of sum_i KL(mean || head_i); gradients flow through the mean too.
template <class T>
TensorT<T> decorrelation_loss(const PredictionSetT<T>& preds, std::type_identity_t<TapeT<T>*> tape);

template <class T>
LossBreakdownT<T> total_loss(const PredictionSetT<T>& preds, const std::vector<int>& labels,
                             T lambda, std::type_identity_t<TapeT<T>*> tape);

// New model over the same backbone parameter storage, keeping the listed heads.
template <class T>
EnsembleT<T> prune_heads(const EnsembleT<T>& model, std::vector<size_t> keep);

// Process-wide count of positive-lambda warnings (distillation comparison mode).
size_t kd_mode_warnings();

using Ensemble = EnsembleT<float>;
using PredictionSet = PredictionSetT<float>;
using LossBreakdown = LossBreakdownT<float>;

}  // namespace gram

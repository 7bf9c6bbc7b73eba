#pragma once

#include <array>
#include <cstddef>
#include <type_traits>
#include <vector>

#include "gram/ensemble.hpp"

namespace gram {

// Hard votes of every head on every example, plus ground truth.
struct VoteTable {
    size_t classes = 0;       // K
    size_t num_heads = 0;     // h
    std::vector<int> labels;  // [M]
    std::vector<int> preds;   // [M*h] row-major

    size_t examples() const { return labels.size(); }
    void validate() const;  // throws DimError/ConfigError
};

struct CorrelationResult {
    double rho = 0;                 // mean over head pairs
    std::vector<double> pair_rho;   // h*(h-1)/2 entries, (i,j) with i<j in row order
};

struct DiagnosticsReport {
    double strength = 0;
    double rho = 0;
    double bound = 0;         // valid only when bound_valid
    bool bound_valid = false; // strength must be positive for the bound to exist
    std::vector<double> margins;     // [M]
    std::vector<int> psi;            // [M*h]
    std::vector<double> pair_rho;
};

// Vote share of the true class minus the largest wrong-class share, per example.
std::vector<double> margin(const VoteTable& votes);

double strength(const VoteTable& votes);

// Per (example, head): +1 voted true class, -1 voted the plurality wrong class
// (lowest index on ties), 0 any other wrong class.
std::vector<int> raw_margin(const VoteTable& votes);

// Mean pairwise Pearson correlation of the psi columns; a zero-variance column
// contributes 0 to its pairs.
CorrelationResult correlation(const std::vector<int>& psi, size_t examples, size_t num_heads);

// rho * (1 - s^2) / s^2; defined only for positive strength.
double generalization_bound(double s, double rho);

DiagnosticsReport diagnose(const VoteTable& votes);

// Hard votes from per-head probability tensors (argmax, lowest index on ties).
template <class T>
VoteTable votes_from_probs(const std::vector<TensorT<T>>& per_head_probs,
                           const std::vector<int>& labels);

// Plurality vote of the table per example, lowest class index on ties.
std::vector<int> ensemble_vote(const VoteTable& votes);

struct Pca2d {
    std::vector<double> proj;        // [n*2]
    std::array<double, 2> variance;  // explained variance per component
    std::vector<double> components;  // [2*d] row-major
};

// Top-2 principal directions by power iteration with deflation
// (tolerance 1e-8, at most 1000 iterations per component).
Pca2d pca_2d(size_t n, size_t d, const std::vector<double>& x);

// Per-head pre-classifier embeddings for a batch: h matrices [N x D_i].
template <class T>
std::vector<std::vector<T>> collect_embeddings(EnsembleT<T>& model, const TensorT<T>& images);

}  // namespace gram

#include "gram/diagnostics.hpp"

#include <cmath>

#include "gram/error.hpp"
#include "gram/rng.hpp"

namespace gram {

void VoteTable::validate() const {
    const size_t M = labels.size();
    if (M == 0) throw DimError("vote table has no examples");
    if (num_heads == 0) throw DimError("vote table has no heads");
    if (classes < 2) throw ConfigError("vote table needs at least 2 classes");
    if (preds.size() != M * num_heads)
        throw DimError("vote table: " + std::to_string(preds.size()) + " predictions for " +
                       std::to_string(M) + "x" + std::to_string(num_heads));
    for (int y : labels)
        if (y < 0 || size_t(y) >= classes) throw ConfigError("label out of range");
    for (int p : preds)
        if (p < 0 || size_t(p) >= classes) throw ConfigError("prediction out of range");
}

namespace {

// Most-voted wrong class for one example's counts; lowest index breaks ties.
int top_wrong_class(const std::vector<int>& counts, int truth) {
    int jhat = -1;
    for (size_t j = 0; j < counts.size(); ++j) {
        if (int(j) == truth) continue;
        if (jhat < 0 || counts[j] > counts[size_t(jhat)]) jhat = int(j);
    }
    return jhat;
}

std::vector<int> vote_counts(const VoteTable& v, size_t m) {
    std::vector<int> counts(v.classes, 0);
    for (size_t a = 0; a < v.num_heads; ++a) counts[size_t(v.preds[m * v.num_heads + a])]++;
    return counts;
}

}  // namespace

std::vector<double> margin(const VoteTable& votes) {
    votes.validate();
    const size_t M = votes.examples(), h = votes.num_heads;
    std::vector<double> out(M);
    for (size_t m = 0; m < M; ++m) {
        const auto counts = vote_counts(votes, m);
        const int y = votes.labels[m];
        const int jhat = top_wrong_class(counts, y);
        out[m] = double(counts[size_t(y)]) / double(h) - double(counts[size_t(jhat)]) / double(h);
    }
    return out;
}

double strength(const VoteTable& votes) {
    const auto margins = margin(votes);
    double s = 0;
    for (double v : margins) s += v;
    return s / double(margins.size());
}

std::vector<int> raw_margin(const VoteTable& votes) {
    votes.validate();
    const size_t M = votes.examples(), h = votes.num_heads;
    std::vector<int> psi(M * h);
    for (size_t m = 0; m < M; ++m) {
        const auto counts = vote_counts(votes, m);
        const int y = votes.labels[m];
        const int jhat = top_wrong_class(counts, y);
        for (size_t a = 0; a < h; ++a) {
            const int p = votes.preds[m * h + a];
            psi[m * h + a] = (p == y) ? 1 : (p == jhat ? -1 : 0);
        }
    }
    return psi;
}

CorrelationResult correlation(const std::vector<int>& psi, size_t examples, size_t num_heads) {
    if (num_heads < 2) throw ConfigError("correlation needs at least 2 heads");
    if (examples < 2) throw ConfigError("correlation needs at least 2 examples");
    if (psi.size() != examples * num_heads) throw DimError("psi table size mismatch");
    CorrelationResult out;
    for (size_t i = 0; i < num_heads; ++i)
        for (size_t j = i + 1; j < num_heads; ++j) {
            double mi = 0, mj = 0;
            for (size_t m = 0; m < examples; ++m) {
                mi += psi[m * num_heads + i];
                mj += psi[m * num_heads + j];
            }
            mi /= double(examples);
            mj /= double(examples);
            double sij = 0, sii = 0, sjj = 0;
            for (size_t m = 0; m < examples; ++m) {
                const double di = psi[m * num_heads + i] - mi;
                const double dj = psi[m * num_heads + j] - mj;
                sij += di * dj;
                sii += di * di;
                sjj += dj * dj;
            }
            // a constant column has no co-fluctuation signal: count its pairs as 0
            out.pair_rho.push_back((sii == 0.0 || sjj == 0.0) ? 0.0 : sij / std::sqrt(sii * sjj));
        }
    double r = 0;
    for (double v : out.pair_rho) r += v;
    out.rho = r / double(out.pair_rho.size());
    return out;
}

double generalization_bound(double s, double rho) {
    if (s <= 0)
        throw StateError("generalization bound undefined for non-positive strength " +
                         std::to_string(s));
    return rho * (1.0 - s * s) / (s * s);
}

DiagnosticsReport diagnose(const VoteTable& votes) {
    DiagnosticsReport rep;
    rep.margins = margin(votes);
    double s = 0;
    for (double v : rep.margins) s += v;
    rep.strength = s / double(rep.margins.size());
    rep.psi = raw_margin(votes);
    if (votes.num_heads >= 2 && votes.examples() >= 2) {
        auto corr = correlation(rep.psi, votes.examples(), votes.num_heads);
        rep.rho = corr.rho;
        rep.pair_rho = std::move(corr.pair_rho);
    }
    if (rep.strength > 0) {
        rep.bound = generalization_bound(rep.strength, rep.rho);
        rep.bound_valid = true;
    }
    return rep;
}

template <class T>
VoteTable votes_from_probs(const std::vector<TensorT<T>>& per_head_probs,
                           const std::vector<int>& labels) {
    if (per_head_probs.empty()) throw DimError("no head probabilities");
    const size_t h = per_head_probs.size();
    const size_t N = per_head_probs[0].dim(0), K = per_head_probs[0].dim(1);
    if (labels.size() != N) throw DimError("label count != batch size");
    VoteTable v;
    v.classes = K;
    v.num_heads = h;
    v.labels = labels;
    v.preds.resize(N * h);
    for (size_t a = 0; a < h; ++a) {
        const auto& p = per_head_probs[a];
        if (p.dim(0) != N || p.dim(1) != K) throw DimError("ragged head probability shapes");
        for (size_t n = 0; n < N; ++n) {
            const T* row = p.data() + n * K;
            size_t best = 0;
            for (size_t k = 1; k < K; ++k)
                if (row[k] > row[best]) best = k;  // strict: lowest index wins ties
            v.preds[n * h + a] = int(best);
        }
    }
    return v;
}

std::vector<int> ensemble_vote(const VoteTable& votes) {
    votes.validate();
    std::vector<int> out(votes.examples());
    for (size_t m = 0; m < votes.examples(); ++m) {
        const auto counts = vote_counts(votes, m);
        size_t best = 0;
        for (size_t j = 1; j < votes.classes; ++j)
            if (counts[j] > counts[best]) best = j;
        out[m] = int(best);
    }
    return out;
}

Pca2d pca_2d(size_t n, size_t d, const std::vector<double>& x) {
    if (n < 2) throw DimError("PCA needs at least 2 samples");
    if (d < 2) throw DimError("PCA to 2-d needs at least 2 feature dims");
    if (x.size() != n * d) throw DimError("feature matrix size mismatch");

    std::vector<double> mean(d, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) mean[j] += x[i * d + j];
    for (double& m : mean) m /= double(n);
    std::vector<double> xc(n * d);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) xc[i * d + j] = x[i * d + j] - mean[j];

    // covariance-vector product without forming the d x d matrix
    auto cov_apply = [&](const std::vector<double>& v, std::vector<double>& out) {
        out.assign(d, 0.0);
        for (size_t i = 0; i < n; ++i) {
            double dot = 0;
            for (size_t j = 0; j < d; ++j) dot += xc[i * d + j] * v[j];
            for (size_t j = 0; j < d; ++j) out[j] += dot * xc[i * d + j];
        }
        for (double& o : out) o /= double(n - 1);
    };

    Pca2d res;
    res.components.assign(2 * d, 0.0);
    std::vector<std::vector<double>> comps;
    Rng rng(0x9ca);
    for (int c = 0; c < 2; ++c) {
        std::vector<double> v(d);
        for (auto& e : v) e = rng.normal();
        double lambda = 0;
        std::vector<double> w;
        for (int it = 0; it < 1000; ++it) {
            cov_apply(v, w);
            for (const auto& prev : comps) {  // deflation: project out found components
                double dot = 0;
                for (size_t j = 0; j < d; ++j) dot += w[j] * prev[j];
                for (size_t j = 0; j < d; ++j) w[j] -= dot * prev[j];
            }
            double norm = 0;
            for (double e : w) norm += e * e;
            norm = std::sqrt(norm);
            if (norm < 1e-15) break;  // exhausted variance: direction arbitrary
            double delta = 0;
            for (size_t j = 0; j < d; ++j) {
                w[j] /= norm;
                delta += (w[j] - v[j]) * (w[j] - v[j]);
            }
            lambda = norm;
            v = w;
            if (std::sqrt(delta) < 1e-8) break;
        }
        // re-orthogonalize and normalize once more for safety
        for (const auto& prev : comps) {
            double dot = 0;
            for (size_t j = 0; j < d; ++j) dot += v[j] * prev[j];
            for (size_t j = 0; j < d; ++j) v[j] -= dot * prev[j];
        }
        double norm = 0;
        for (double e : v) norm += e * e;
        norm = std::sqrt(norm);
        if (norm > 1e-15)
            for (double& e : v) e /= norm;
        res.variance[size_t(c)] = lambda;
        for (size_t j = 0; j < d; ++j) res.components[size_t(c) * d + j] = v[j];
        comps.push_back(v);
    }
    res.proj.assign(n * 2, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 2; ++c) {
            double dot = 0;
            for (size_t j = 0; j < d; ++j) dot += xc[i * d + j] * res.components[size_t(c) * d + j];
            res.proj[i * 2 + size_t(c)] = dot;
        }
    return res;
}

template <class T>
std::vector<std::vector<T>> collect_embeddings(EnsembleT<T>& model, const TensorT<T>& images) {
    auto feats = backbone_forward(model.backbone, images, BnMode::eval, static_cast<TapeT<T>*>(nullptr));
    auto tokens = aggregate_stages(model.backbone, feats, model.cfg.aggregate,
                                   static_cast<TapeT<T>*>(nullptr));
    std::vector<std::vector<T>> out;
    for (auto& head : model.heads) {
        auto y = head_embedding(tokens, head, static_cast<TapeT<T>*>(nullptr));
        out.emplace_back(y.data(), y.data() + y.numel());
    }
    return out;
}

template VoteTable votes_from_probs<float>(const std::vector<TensorT<float>>&,
                                           const std::vector<int>&);
template VoteTable votes_from_probs<double>(const std::vector<TensorT<double>>&,
                                            const std::vector<int>&);
template std::vector<std::vector<float>> collect_embeddings<float>(EnsembleT<float>&,
                                                                   const TensorT<float>&);
template std::vector<std::vector<double>> collect_embeddings<double>(EnsembleT<double>&,
                                                                     const TensorT<double>&);

}  // namespace gram

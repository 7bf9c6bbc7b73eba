#include <cmath>
#include <vector>

#include "doctest.h"
#include "gram/ensemble.hpp"
#include "gram/error.hpp"
#include "gram/ops.hpp"
#include "gram/rng.hpp"
#include "oracles.hpp"

using namespace gram;

namespace {

EnsembleConfig small_cfg(size_t heads = 3) {
    EnsembleConfig cfg;
    cfg.backbone.depth = 8;
    cfg.backbone.input_side = 16;
    cfg.backbone.stem_channels = 4;
    cfg.backbone.stage_channels = {4, 6, 8};
    cfg.head.in_channels = 8;
    cfg.head.reduced = 4;
    cfg.head.cardinality = 2;
    cfg.head.attn_heads = 2;
    cfg.head.classes = 3;
    cfg.num_heads = heads;
    return cfg;
}

// Hand-built prediction set over explicit per-head probability rows.
template <class T>
PredictionSetT<T> preds_of(const std::vector<std::vector<T>>& head_probs, size_t n, size_t k) {
    PredictionSetT<T> out;
    std::vector<T> mean(n * k, T(0));
    for (const auto& hp : head_probs) {
        out.per_head_probs.push_back(TensorT<T>::from({n, k}, hp));
        out.per_head_logits.push_back(TensorT<T>::zeros({n, k}));
        for (size_t i = 0; i < n * k; ++i) mean[i] += hp[i];
    }
    for (auto& v : mean) v /= T(head_probs.size());
    out.mean_probs = TensorT<T>::from({n, k}, mean);
    return out;
}

}  // namespace

TEST_SUITE("ensemble") {

TEST_CASE("config validation") {
    auto cfg = small_cfg();
    CHECK_NOTHROW(cfg.validate());
    cfg.head.in_channels = 6;  // head must sit on the final stage width
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_cfg();
    cfg.num_heads = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("uniform probabilities cost h ln K") {
    const size_t n = 4, k = 10, h = 5;
    std::vector<std::vector<double>> head_probs(h, std::vector<double>(n * k, 1.0 / double(k)));
    auto preds = preds_of<double>(head_probs, n, k);
    std::vector<int> labels{0, 3, 7, 9};
    auto ce = ce_sum(preds, labels, nullptr);
    CHECK(ce.item() == doctest::Approx(double(h) * std::log(10.0)).epsilon(1e-10));
    CHECK(ce.item() == doctest::Approx(11.512925464970229).epsilon(1e-10));
}

TEST_CASE("per-head breakdown sums to the total cross entropy") {
    Rng rng(31);
    const size_t n = 6, k = 4, h = 3;
    std::vector<std::vector<double>> head_probs;
    for (size_t i = 0; i < h; ++i) {
        std::vector<double> p(n * k);
        for (size_t r = 0; r < n; ++r) {
            double z = 0;
            for (size_t c = 0; c < k; ++c) z += p[r * k + c] = rng.uniform() + 1e-3;
            for (size_t c = 0; c < k; ++c) p[r * k + c] /= z;
        }
        head_probs.push_back(std::move(p));
    }
    auto preds = preds_of<double>(head_probs, n, k);
    std::vector<int> labels{1, 0, 2, 3, 1, 2};
    std::vector<double> per_head;
    auto ce = ce_sum(preds, labels, nullptr, &per_head);
    REQUIRE(per_head.size() == h);
    double total = 0;
    for (double v : per_head) {
        CHECK(v > 0);
        total += v;
    }
    CHECK(ce.item() == doctest::Approx(total).epsilon(1e-12));
}

TEST_CASE("worked decorrelation value") {
    // f1 = [0.9, 0.1], f2 = [0.1, 0.9]: mean is uniform and the pair costs
    // 2 * (0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)) nats
    auto preds = preds_of<double>({{0.9, 0.1}, {0.1, 0.9}}, 1, 2);
    auto dec = decorrelation_loss(preds, nullptr);
    const double want = 2.0 * (0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1));
    CHECK(dec.item() == doctest::Approx(want).epsilon(1e-10));
    CHECK(dec.item() == doctest::Approx(1.0217).epsilon(1e-4));

    std::vector<int> labels{0};
    auto lb = total_loss(preds, labels, -0.8, nullptr);
    CHECK(lb.total.item() == doctest::Approx(lb.ce_sum - 0.81736).epsilon(1e-4));
}

TEST_CASE("double-sum form matches the scalar kl oracle") {
    Rng rng(77);
    for (int rep = 0; rep < 50; ++rep) {
        const size_t n = 1 + size_t(rng.uniform_int(3));
        const size_t k = 2 + size_t(rng.uniform_int(4));
        const size_t h = 2 + size_t(rng.uniform_int(3));
        std::vector<std::vector<double>> head_probs;
        for (size_t i = 0; i < h; ++i) {
            std::vector<double> p(n * k);
            for (size_t r = 0; r < n; ++r) {
                double z = 0;
                for (size_t c = 0; c < k; ++c) z += p[r * k + c] = rng.uniform() + 1e-3;
                for (size_t c = 0; c < k; ++c) p[r * k + c] /= z;
            }
            head_probs.push_back(std::move(p));
        }
        auto preds = preds_of<double>(head_probs, n, k);
        auto dec = decorrelation_loss(preds, nullptr);

        double want = 0;
        for (size_t r = 0; r < n; ++r) {
            std::vector<double> mean(k, 0.0);
            for (size_t i = 0; i < h; ++i)
                for (size_t c = 0; c < k; ++c) mean[c] += head_probs[i][r * k + c] / double(h);
            for (size_t i = 0; i < h; ++i) {
                std::vector<double> fi(head_probs[i].begin() + long(r * k),
                                       head_probs[i].begin() + long((r + 1) * k));
                want += oracle::kl_div(mean, fi);
            }
        }
        want /= double(n);
        CHECK(dec.item() == doctest::Approx(want).epsilon(1e-9));
        CHECK(dec.item() >= 0.0);
    }
}

TEST_CASE("identical heads have zero decorrelation cost") {
    std::vector<double> p{0.2, 0.5, 0.3, 0.6, 0.1, 0.3};
    auto preds = preds_of<double>({p, p, p}, 2, 3);
    auto dec = decorrelation_loss(preds, nullptr);
    CHECK(std::abs(dec.item()) < 1e-12);
}

TEST_CASE("zero lambda total is the cross entropy bit for bit") {
    auto preds = preds_of<float>({{0.9f, 0.1f}, {0.2f, 0.8f}}, 1, 2);
    std::vector<int> labels{1};
    auto ce = ce_sum(preds, labels, nullptr);
    auto lb = total_loss(preds, labels, 0.0f, nullptr);
    CHECK(lb.total.item() == ce.item());  // exact float equality
    // the breakdown still reports the measured value; it just stays out of the total
    CHECK(lb.dec == decorrelation_loss(preds, nullptr).item());
    CHECK(lb.dec > 0.0f);
}

TEST_CASE("positive lambda counts as distillation mode") {
    auto preds = preds_of<float>({{0.9f, 0.1f}, {0.2f, 0.8f}}, 1, 2);
    std::vector<int> labels{0};
    const size_t before = kd_mode_warnings();
    total_loss(preds, labels, 0.7f, nullptr);
    total_loss(preds, labels, 0.7f, nullptr);
    CHECK(kd_mode_warnings() == before + 2);
    total_loss(preds, labels, -0.7f, nullptr);
    CHECK(kd_mode_warnings() == before + 2);
}

TEST_CASE("loss gradients agree with finite differences") {
    Rng rng(5151);
    const size_t n = 2, k = 3, h = 2;
    auto l0 = TensorT<double>::randn({n, k}, rng, 1.0);
    auto l1 = TensorT<double>::randn({n, k}, rng, 1.0);
    std::vector<int> labels{2, 0};

    auto loss_of = [&](TapeT<double>* tape) {
        PredictionSetT<double> preds;
        preds.per_head_logits = {l0, l1};
        for (auto& l : preds.per_head_logits)
            preds.per_head_probs.push_back(softmax(l, 1, tape));
        auto acc = add(preds.per_head_probs[0], preds.per_head_probs[1], tape);
        preds.mean_probs = scale(acc, 1.0 / double(h), tape);
        return total_loss(preds, labels, -0.8, tape).total;
    };
    CHECK(oracle::fd_check(l0, loss_of).max_rel < 1e-6);
    CHECK(oracle::fd_check(l1, loss_of).max_rel < 1e-6);
}

TEST_CASE("build is deterministic and heads are decorrelated at birth") {
    auto a = build_model<float>(small_cfg(), 99);
    auto b = build_model<float>(small_cfg(), 99);
    std::vector<std::pair<std::string, std::vector<float>>> pa, pb;
    a.visit_params([&](const std::string& nm, Tensor& t) {
        pa.emplace_back(nm, std::vector<float>(t.data(), t.data() + t.numel()));
    });
    b.visit_params([&](const std::string& nm, Tensor& t) {
        pb.emplace_back(nm, std::vector<float>(t.data(), t.data() + t.numel()));
    });
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(pa[i].second == pb[i].second);
    }
    // sibling heads draw different weights
    CHECK(a.heads.size() == 3);
    bool differ = false;
    for (size_t i = 0; i < a.heads[0].w_c.numel(); ++i)
        differ = differ || a.heads[0].w_c.data()[i] != a.heads[1].w_c.data()[i];
    CHECK(differ);
}

TEST_CASE("aggregation maps enter the parameter walk only in multi mode") {
    auto final_model = build_model<float>(small_cfg(), 3);
    bool has_agg = false;
    final_model.visit_params(
        [&](const std::string& nm, Tensor&) { has_agg = has_agg || nm.rfind("bb.agg", 0) == 0; });
    CHECK_FALSE(has_agg);

    auto cfg = small_cfg();
    cfg.aggregate = Aggregate::multi;
    auto multi_model = build_model<float>(cfg, 3);
    multi_model.visit_params(
        [&](const std::string& nm, Tensor&) { has_agg = has_agg || nm.rfind("bb.agg", 0) == 0; });
    CHECK(has_agg);
}

TEST_CASE("mean probabilities average the heads") {
    auto model = build_model<float>(small_cfg(), 12);
    Rng rng(8);
    auto x = Tensor::randn({2, 3, 16, 16}, rng, 1.0f);
    auto preds = forward_all(model, x, BnMode::train, nullptr);
    REQUIRE(preds.per_head_probs.size() == 3);
    for (size_t i = 0; i < preds.mean_probs.numel(); ++i) {
        float want = 0;
        for (auto& hp : preds.per_head_probs) want += hp.data()[i];
        want /= 3.0f;
        CHECK(preds.mean_probs.data()[i] == doctest::Approx(want).epsilon(1e-6));
    }
    // probabilities are rows on the simplex
    for (size_t r = 0; r < 2; ++r) {
        float row = 0;
        for (size_t c = 0; c < 3; ++c) row += preds.mean_probs.data()[r * 3 + c];
        CHECK(row == doctest::Approx(1.0f).epsilon(1e-5));
    }
}

TEST_CASE("pruning keeps listed heads and shares every parameter") {
    auto model = build_model<float>(small_cfg(), 20);
    Rng rng(14);
    auto x = Tensor::randn({2, 3, 16, 16}, rng, 1.0f);
    forward_all(model, x, BnMode::train, nullptr);  // prime running stats

    auto pruned = prune_heads(model, {2, 0, 2});  // duplicates and order collapse
    REQUIRE(pruned.heads.size() == 2);
    CHECK(pruned.cfg.num_heads == 2);
    CHECK(pruned.backbone.stem.shares_storage_with(model.backbone.stem));
    CHECK(pruned.heads[0].w_cls.shares_storage_with(model.heads[0].w_cls));
    CHECK(pruned.heads[1].w_cls.shares_storage_with(model.heads[2].w_cls));

    auto full = forward_all(model, x, BnMode::eval, nullptr);
    auto part = forward_all(pruned, x, BnMode::eval, nullptr);
    for (size_t i = 0; i < full.per_head_logits[0].numel(); ++i) {
        CHECK(part.per_head_logits[0].data()[i] == full.per_head_logits[0].data()[i]);
        CHECK(part.per_head_logits[1].data()[i] == full.per_head_logits[2].data()[i]);
    }

    CHECK_THROWS_AS(prune_heads(model, {}), ConfigError);
    CHECK_THROWS_AS(prune_heads(model, {3}), ConfigError);

    auto all = prune_heads(model, {0, 1, 2});
    CHECK(all.heads.size() == 3);
}

}  // TEST_SUITE

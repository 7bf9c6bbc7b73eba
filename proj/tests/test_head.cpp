#include <cmath>
#include <vector>

#include "doctest.h"
#include "gram/error.hpp"
#include "gram/head.hpp"
#include "gram/ops.hpp"
#include "gram/rng.hpp"
#include "oracles.hpp"

using namespace gram;

namespace {

// Small all-double head for derivative and oracle work.
HeadConfig tiny_cfg(size_t cin = 4, size_t reduced = 4, size_t card = 2, size_t attn_heads = 2,
                    size_t classes = 3) {
    HeadConfig cfg;
    cfg.in_channels = cin;
    cfg.reduced = reduced;
    cfg.cardinality = card;
    cfg.attn_heads = attn_heads;
    cfg.classes = classes;
    return cfg;
}

void fill_identity(TensorT<double>& t, size_t n) {
    for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = 0.0;
    for (size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
}

}  // namespace

TEST_SUITE("head") {

TEST_CASE("config validation and derived sizes") {
    HeadConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.attn_width() == 64);
    CHECK(cfg.group_width() == 64);
    CHECK(cfg.gram_len() == 64 * 64);

    cfg.reduced = 8;
    cfg.cardinality = 2;
    CHECK(cfg.group_width() == 4);
    CHECK(cfg.gram_len() == 32);

    cfg.cardinality = 3;  // does not divide 8
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.cardinality = 2;
    cfg.attn_heads = 5;  // does not divide the attention width
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg.kind = HeadKind::gap_fc;  // pooled baseline ignores gramian geometry
    CHECK_NOTHROW(cfg.validate());

    CHECK(head_kind_from_name("gram") == HeadKind::gram);
    CHECK(head_kind_from_name(head_kind_name(HeadKind::learned_token)) ==
          HeadKind::learned_token);
    CHECK_THROWS_AS(head_kind_from_name("gap"), ConfigError);
}

TEST_CASE("worked gramian example") {
    // V = [[1,2],[3,4]] gives V^T V = [[10,14],[14,20]], vec = 10,14,14,20
    auto cfg = tiny_cfg(2, 2, 1, 1, 2);
    auto head = build_head<double>(cfg, 7);
    fill_identity(head.w_c, 2);
    auto x = TensorT<double>::from({1, 2, 2}, {1, 2, 3, 4});

    for (size_t i = 0; i < head.w_g.numel(); ++i) head.w_g.data()[i] = 0.0;
    head.w_g.data()[0 * 2 + 0] = 1.0;  // token[0] reads vec[0] = 10
    head.w_g.data()[3 * 2 + 1] = 1.0;  // token[1] reads vec[3] = 20
    auto tok = gram_token(x, head, nullptr);
    REQUIRE(tok.shape() == Shape{1, 2});
    CHECK(tok.data()[0] == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(tok.data()[1] == doctest::Approx(20.0).epsilon(1e-12));

    // two groups of width 1: per-group gramians are 10 and 20
    auto cfg2 = tiny_cfg(2, 2, 2, 1, 2);
    auto head2 = build_head<double>(cfg2, 7);
    fill_identity(head2.w_c, 2);
    REQUIRE(cfg2.gram_len() == 2);
    fill_identity(head2.w_g, 2);
    auto tok2 = gram_token(x, head2, nullptr);
    CHECK(tok2.data()[0] == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(tok2.data()[1] == doctest::Approx(20.0).epsilon(1e-12));
}

TEST_CASE("zero mixing weights give a zero token") {
    auto cfg = tiny_cfg();
    auto head = build_head<double>(cfg, 3);
    for (size_t i = 0; i < head.w_g.numel(); ++i) head.w_g.data()[i] = 0.0;
    Rng rng(5);
    auto x = TensorT<double>::randn({3, 6, 4}, rng, 1.0);
    auto tok = gram_token(x, head, nullptr);
    for (size_t i = 0; i < tok.numel(); ++i) CHECK(tok.data()[i] == 0.0);
}

TEST_CASE("identity projection is a passthrough") {
    auto cfg = tiny_cfg(4, 4, 1, 1, 3);
    auto head = build_head<double>(cfg, 9);
    fill_identity(head.w_c, 4);
    Rng rng(11);
    auto x = TensorT<double>::randn({2, 5, 4}, rng, 1.0);
    auto v = project_features(x, head, nullptr);
    REQUIRE(v.shape() == x.shape());
    for (size_t i = 0; i < x.numel(); ++i)
        CHECK(v.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("per-group gramians are symmetric and positive semidefinite") {
    Rng rng(1234);
    for (int rep = 0; rep < 50; ++rep) {
        const size_t card = size_t(1) << rng.uniform_int(3);  // 1, 2, 4
        const size_t width = card * (1 + size_t(rng.uniform_int(2)));
        const size_t S = 2 + size_t(rng.uniform_int(6));
        auto cfg = tiny_cfg(width, width, card, 1, 2);
        auto head = build_head<double>(cfg, uint64_t(rep));
        fill_identity(head.w_c, width);

        auto x = TensorT<double>::randn({1, S, width}, rng, 1.0);
        auto g = grouped_gramian(x, card, nullptr);  // [1, gram_len]
        const size_t gw = width / card;
        for (size_t grp = 0; grp < card; ++grp) {
            std::vector<double> mat(g.data() + grp * gw * gw, g.data() + (grp + 1) * gw * gw);
            for (size_t i = 0; i < gw; ++i)
                for (size_t j = 0; j < gw; ++j)
                    CHECK(std::abs(mat[i * gw + j] - mat[j * gw + i]) <= 1e-12);
            CHECK(oracle::min_symmetric_eigenvalue(gw, mat) >= -1e-10);
        }
    }
}

TEST_CASE("token order does not change the gramian") {
    Rng rng(77);
    auto x = TensorT<double>::randn({1, 6, 4}, rng, 1.0);
    auto g = grouped_gramian(x, 2, nullptr);

    // reverse the token order
    auto xr = TensorT<double>::zeros({1, 6, 4});
    for (size_t s = 0; s < 6; ++s)
        for (size_t c = 0; c < 4; ++c) xr.data()[(5 - s) * 4 + c] = x.data()[s * 4 + c];
    auto gr = grouped_gramian(xr, 2, nullptr);
    for (size_t i = 0; i < g.numel(); ++i)
        CHECK(std::abs(g.data()[i] - gr.data()[i]) <= 1e-10);
}

TEST_CASE("uniform attention reduces to a layer norm of twice the token") {
    // zero keys make every score equal; identical values make the average exact
    auto cfg = tiny_cfg(4, 4, 1, 1, 2);
    auto head = build_head<double>(cfg, 21);
    fill_identity(head.w_v, 4);
    fill_identity(head.w_o, 4);
    for (size_t i = 0; i < 16; ++i) head.w_k.data()[i] = 0.0;
    for (size_t i = 0; i < 4; ++i) {
        head.ln_g.data()[i] = 1.0;
        head.ln_b.data()[i] = 0.0;
    }

    const std::vector<double> v{1, 2, 3, 4};
    auto token = TensorT<double>::from({1, 4}, v);
    auto xproj = TensorT<double>::from({1, 2, 4}, {1, 2, 3, 4, 1, 2, 3, 4});
    auto out = class_attention(token, xproj, head, nullptr);

    // residual 2v, then layer norm: mean 5, var 5
    const double mean = 5.0, var = 5.0;
    for (size_t i = 0; i < 4; ++i) {
        const double want = (2.0 * v[i] - mean) / std::sqrt(var + 1e-6);
        CHECK(out.data()[i] == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("attention weights match a scalar oracle") {
    auto cfg = tiny_cfg(1, 1, 1, 1, 2);
    auto head = build_head<double>(cfg, 13);
    const double wq = 0.7, wk = -1.3, wv = 0.9, wo = 1.1;
    head.w_q.data()[0] = wq;
    head.w_k.data()[0] = wk;
    head.w_v.data()[0] = wv;
    head.w_o.data()[0] = wo;

    const double t = 0.8, a = -0.4;
    auto token = TensorT<double>::from({1, 1}, {t});
    auto xproj = TensorT<double>::from({1, 1, 1}, {a});
    TensorT<double> probs;
    class_attention(token, xproj, head, nullptr, &probs);

    REQUIRE(probs.shape() == Shape{1, 1, 2});
    const double q = t * wq;
    const double s0 = q * (a * wk), s1 = q * (t * wk);  // scale 1/sqrt(1)
    const double m = std::max(s0, s1);
    const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    CHECK(probs.data()[0] == doctest::Approx(e0 / (e0 + e1)).epsilon(1e-12));
    CHECK(probs.data()[1] == doctest::Approx(e1 / (e0 + e1)).epsilon(1e-12));
    CHECK(probs.data()[0] + probs.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("parameter count shrinks as cardinality grows") {
    size_t last = 0;
    for (size_t card : {1u, 2u, 4u, 8u}) {
        auto cfg = tiny_cfg(16, 16, card, 1, 4);
        auto head = build_head<float>(cfg, 2);
        const size_t count = head.param_count();
        if (last != 0) CHECK(count < last);
        last = count;
    }
}

TEST_CASE("head kinds expose the expected parameters") {
    auto gap = tiny_cfg(6, 6, 1, 1, 4);
    gap.kind = HeadKind::gap_fc;
    auto gap_head = build_head<float>(gap, 3);
    size_t n = 0;
    gap_head.visit_params([&](const std::string& name, Tensor&) {
        CHECK(name == "wcls");
        ++n;
    });
    CHECK(n == 1);

    auto learned = tiny_cfg(6, 6, 1, 1, 4);
    learned.kind = HeadKind::learned_token;
    auto lt_head = build_head<float>(learned, 3);
    bool has_token = false, has_wc = false;
    lt_head.visit_params([&](const std::string& name, Tensor&) {
        has_token = has_token || name == "tok";
        has_wc = has_wc || name == "wc";
    });
    CHECK(has_token);
    CHECK_FALSE(has_wc);
}

TEST_CASE("pooled baseline embedding is the token mean") {
    auto cfg = tiny_cfg(3, 3, 1, 1, 2);
    cfg.kind = HeadKind::gap_fc;
    auto head = build_head<double>(cfg, 5);
    auto x = TensorT<double>::from({1, 2, 3}, {1, 2, 3, 5, 6, 7});
    auto emb = head_embedding(x, head, nullptr);
    REQUIRE(emb.shape() == Shape{1, 3});
    CHECK(emb.data()[0] == doctest::Approx(3.0));
    CHECK(emb.data()[1] == doctest::Approx(4.0));
    CHECK(emb.data()[2] == doctest::Approx(5.0));
}

TEST_CASE("same head and input give identical logits") {
    auto cfg = tiny_cfg();
    auto head = build_head<float>(cfg, 41);
    Rng rng(6);
    auto x = Tensor::randn({2, 5, 4}, rng, 1.0f);
    auto a = head_forward(x, head, nullptr);
    auto b = head_forward(x, head, nullptr);
    REQUIRE(a.shape() == Shape{2, 3});
    for (size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("full chain gradients agree with finite differences") {
    auto cfg = tiny_cfg(4, 4, 2, 2, 3);
    auto head = build_head<double>(cfg, 55);
    Rng rng(91);
    auto x = TensorT<double>::randn({2, 5, 4}, rng, 0.7);
    auto w = TensorT<double>::randn({2, 3}, rng, 1.0);  // fixed mixing to a scalar

    auto loss_of = [&](TapeT<double>* tape) {
        return sum_all(mul(head_forward(x, head, tape), w, tape), tape);
    };
    auto rep = oracle::fd_check(x, loss_of);
    CHECK(rep.max_rel < 1e-6);
    CHECK(rep.checked == x.numel());

    head.visit_params([&](const std::string& name, TensorT<double>& p) {
        INFO("parameter ", name);
        auto r = oracle::fd_check(p, loss_of);
        CHECK(r.max_rel < 1e-6);
    });

    // the intermediate stages alone
    auto tok_loss = [&](TapeT<double>* tape) {
        auto tok = gram_token(x, head, tape);
        return sum_all(mul(tok, tok, tape), tape);
    };
    CHECK(oracle::fd_check(x, tok_loss).max_rel < 1e-6);
}

}  // TEST_SUITE

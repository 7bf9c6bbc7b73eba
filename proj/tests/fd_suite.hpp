#pragma once

// Central-difference gradient sweep over every differentiable operation.
// Shared between the unit tests and the acceptance gate so both judge the
// same arithmetic; only the case count differs.

#include <string>
#include <vector>

#include "gram/ops.hpp"
#include "gram/rng.hpp"
#include "oracles.hpp"

namespace fdsuite {

struct OpReport {
    std::string op;
    double max_rel = 0;
    size_t cases = 0;
    size_t components = 0;
};

inline void absorb(OpReport& rep, const oracle::FdReport& r) {
    rep.max_rel = std::max(rep.max_rel, r.max_rel);
    rep.components += r.checked;
}

inline std::vector<OpReport> run_all(size_t cases_per_op, uint64_t seed) {
    using namespace gram;
    std::vector<OpReport> out;
    size_t op_index = 0;

    auto run = [&](const char* name, auto&& one_case) {
        OpReport rep;
        rep.op = name;
        Rng rng(mix_keys(seed, ++op_index));
        for (size_t c = 0; c < cases_per_op; ++c) {
            one_case(rng, rep);
            ++rep.cases;
        }
        out.push_back(std::move(rep));
    };

    auto weighted_sum = [](const TensorD& y, const TensorD& w, TapeD* t) {
        return sum_all(mul(y, w, t), t);
    };

    run("matmul", [&](Rng& rng, OpReport& rep) {
        const size_t m = 1 + rng.uniform_int(4), k = 1 + rng.uniform_int(4),
                     p = 1 + rng.uniform_int(4);
        auto a = TensorD::randn({m, k}, rng, 1.0);
        auto b = TensorD::randn({k, p}, rng, 1.0);
        auto w = TensorD::randn({m, p}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(matmul(a, b, t), w, t); };
        absorb(rep, oracle::fd_check(a, fwd));
        absorb(rep, oracle::fd_check(b, fwd));
    });

    run("conv2d", [&](Rng& rng, OpReport& rep) {
        const size_t N = 1 + rng.uniform_int(2), C = 1 + rng.uniform_int(3);
        const size_t k = rng.bernoulli(0.5) ? 3 : 1;
        const size_t H = k + rng.uniform_int(4), W = k + rng.uniform_int(4);
        const size_t Co = 1 + rng.uniform_int(3);
        const size_t stride = 1 + rng.uniform_int(2);
        const size_t pad = rng.bernoulli(0.5) ? (k - 1) / 2 : 0;
        auto x = TensorD::randn({N, C, H, W}, rng, 1.0);
        auto wt = TensorD::randn({Co, C, k, k}, rng, 1.0);
        auto y0 = conv2d(x, wt, stride, pad, nullptr);
        auto w = TensorD::randn(y0.shape(), rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(conv2d(x, wt, stride, pad, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
        absorb(rep, oracle::fd_check(wt, fwd));
    });

    run("softmax", [&](Rng& rng, OpReport& rep) {
        const size_t r = 1 + rng.uniform_int(3), c = 2 + rng.uniform_int(4);
        const size_t axis = rng.uniform_int(2);
        auto x = TensorD::randn({r, c}, rng, 2.0);
        auto w = TensorD::randn({r, c}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(softmax(x, axis, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("batchnorm2d_train", [&](Rng& rng, OpReport& rep) {
        const size_t N = 2, C = 1 + rng.uniform_int(3), H = 2 + rng.uniform_int(3),
                     W = 2 + rng.uniform_int(3);
        auto x = TensorD::randn({N, C, H, W}, rng, 1.0);
        auto gamma = TensorD::randn({C}, rng, 0.5);
        auto beta = TensorD::randn({C}, rng, 0.5);
        auto w = TensorD::randn({N, C, H, W}, rng, 1.0);
        auto fwd = [&](TapeD* t) {
            BnStats<double> stats;  // fresh: running-stat updates must not leak across calls
            return weighted_sum(
                batchnorm2d(x, gamma, beta, stats, BnMode::train, 0.1, 1e-5, t), w, t);
        };
        absorb(rep, oracle::fd_check(x, fwd));
        absorb(rep, oracle::fd_check(gamma, fwd));
        absorb(rep, oracle::fd_check(beta, fwd));
    });

    run("batchnorm2d_eval", [&](Rng& rng, OpReport& rep) {
        const size_t N = 2, C = 1 + rng.uniform_int(3), H = 2, W = 2 + rng.uniform_int(2);
        auto x = TensorD::randn({N, C, H, W}, rng, 1.0);
        auto gamma = TensorD::randn({C}, rng, 0.5);
        auto beta = TensorD::randn({C}, rng, 0.5);
        auto w = TensorD::randn({N, C, H, W}, rng, 1.0);
        BnStats<double> stats;
        auto prime = TensorD::randn({N, C, H, W}, rng, 1.0);
        (void)batchnorm2d(prime, gamma, beta, stats, BnMode::train, 0.5, 1e-5,
                          static_cast<TapeD*>(nullptr));
        auto fwd = [&](TapeD* t) {
            return weighted_sum(batchnorm2d(x, gamma, beta, stats, BnMode::eval, 0.1, 1e-5, t), w,
                                t);
        };
        absorb(rep, oracle::fd_check(x, fwd));
        absorb(rep, oracle::fd_check(gamma, fwd));
        absorb(rep, oracle::fd_check(beta, fwd));
    });

    run("add", [&](Rng& rng, OpReport& rep) {
        const size_t n = 1 + rng.uniform_int(8);
        auto a = TensorD::randn({n}, rng, 1.0);
        auto b = TensorD::randn({n}, rng, 1.0);
        auto w = TensorD::randn({n}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(add(a, b, t), w, t); };
        absorb(rep, oracle::fd_check(a, fwd));
        absorb(rep, oracle::fd_check(b, fwd));
    });

    run("mul", [&](Rng& rng, OpReport& rep) {
        const size_t n = 1 + rng.uniform_int(8);
        auto a = TensorD::randn({n}, rng, 1.0);
        auto b = TensorD::randn({n}, rng, 1.0);
        auto w = TensorD::randn({n}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(mul(a, b, t), w, t); };
        absorb(rep, oracle::fd_check(a, fwd));
        absorb(rep, oracle::fd_check(b, fwd));
    });

    run("scale", [&](Rng& rng, OpReport& rep) {
        const size_t n = 1 + rng.uniform_int(8);
        const double alpha = rng.normal() * 2;
        auto x = TensorD::randn({n}, rng, 1.0);
        auto w = TensorD::randn({n}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(scale(x, alpha, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("relu", [&](Rng& rng, OpReport& rep) {
        const size_t n = 2 + rng.uniform_int(8);
        auto x = TensorD::randn({n}, rng, 1.0);
        // keep samples away from the kink so central differences stay one-sided
        for (size_t i = 0; i < n; ++i)
            x.data()[i] += (x.data()[i] >= 0 ? 0.05 : -0.05);
        auto w = TensorD::randn({n}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(relu(x, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("log_clamped", [&](Rng& rng, OpReport& rep) {
        const size_t n = 2 + rng.uniform_int(6);
        auto x = TensorD::zeros({n});
        for (size_t i = 0; i < n; ++i)
            x.data()[i] = rng.bernoulli(0.8) ? 0.05 + std::abs(rng.normal())  // live region
                                             : -std::abs(rng.normal()) - 0.01;  // clamped region
        auto w = TensorD::randn({n}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(log_clamped(x, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("exp", [&](Rng& rng, OpReport& rep) {
        const size_t n = 1 + rng.uniform_int(8);
        auto x = TensorD::randn({n}, rng, 1.0);
        auto w = TensorD::randn({n}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(exp(x, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("sum_all", [&](Rng& rng, OpReport& rep) {
        const size_t n = 1 + rng.uniform_int(10);
        auto x = TensorD::randn({n}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return sum_all(x, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("mean_all", [&](Rng& rng, OpReport& rep) {
        const size_t n = 1 + rng.uniform_int(10);
        auto x = TensorD::randn({n}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return mean_all(x, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("sum_lastdim", [&](Rng& rng, OpReport& rep) {
        const size_t r = 1 + rng.uniform_int(4), d = 1 + rng.uniform_int(5);
        auto x = TensorD::randn({r, d}, rng, 1.0);
        auto w = TensorD::randn({r}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(sum_lastdim(x, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("global_avg_pool", [&](Rng& rng, OpReport& rep) {
        const size_t N = 1 + rng.uniform_int(2), C = 1 + rng.uniform_int(3),
                     H = 1 + rng.uniform_int(3), W = 1 + rng.uniform_int(3);
        auto x = TensorD::randn({N, C, H, W}, rng, 1.0);
        auto w = TensorD::randn({N, C}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(global_avg_pool(x, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("mean_tokens", [&](Rng& rng, OpReport& rep) {
        const size_t N = 1 + rng.uniform_int(2), S = 1 + rng.uniform_int(4),
                     D = 1 + rng.uniform_int(4);
        auto x = TensorD::randn({N, S, D}, rng, 1.0);
        auto w = TensorD::randn({N, D}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(mean_tokens(x, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("avg_pool2d", [&](Rng& rng, OpReport& rep) {
        const size_t N = 1 + rng.uniform_int(2), C = 1 + rng.uniform_int(2);
        const size_t factor = 1 + rng.uniform_int(2);
        const size_t H = factor * (1 + rng.uniform_int(2)), W = factor * (1 + rng.uniform_int(2));
        auto x = TensorD::randn({N, C, H, W}, rng, 1.0);
        auto w = TensorD::randn({N, C, H / factor, W / factor}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(avg_pool2d(x, factor, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("add_bias", [&](Rng& rng, OpReport& rep) {
        const size_t r = 1 + rng.uniform_int(4), d = 1 + rng.uniform_int(5);
        auto x = TensorD::randn({r, d}, rng, 1.0);
        auto b = TensorD::randn({d}, rng, 1.0);
        auto w = TensorD::randn({r, d}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(add_bias(x, b, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
        absorb(rep, oracle::fd_check(b, fwd));
    });

    run("pick_rows", [&](Rng& rng, OpReport& rep) {
        const size_t r = 1 + rng.uniform_int(4), k = 2 + rng.uniform_int(4);
        auto x = TensorD::randn({r, k}, rng, 1.0);
        std::vector<int> labels(r);
        for (auto& l : labels) l = int(rng.uniform_int(k));
        auto w = TensorD::randn({r}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(pick_rows(x, labels, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("layernorm", [&](Rng& rng, OpReport& rep) {
        const size_t r = 1 + rng.uniform_int(3), d = 2 + rng.uniform_int(5);
        auto x = TensorD::randn({r, d}, rng, 1.0);
        auto gamma = TensorD::randn({d}, rng, 0.5);
        auto beta = TensorD::randn({d}, rng, 0.5);
        auto w = TensorD::randn({r, d}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(layernorm(x, gamma, beta, 1e-6, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
        absorb(rep, oracle::fd_check(gamma, fwd));
        absorb(rep, oracle::fd_check(beta, fwd));
    });

    run("concat_token", [&](Rng& rng, OpReport& rep) {
        const size_t N = 1 + rng.uniform_int(2), S = 1 + rng.uniform_int(4),
                     D = 1 + rng.uniform_int(4);
        auto x = TensorD::randn({N, S, D}, rng, 1.0);
        auto tok = TensorD::randn({N, D}, rng, 1.0);
        auto w = TensorD::randn({N, S + 1, D}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(concat_token(x, tok, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
        absorb(rep, oracle::fd_check(tok, fwd));
    });

    run("nchw_to_tokens", [&](Rng& rng, OpReport& rep) {
        const size_t N = 1 + rng.uniform_int(2), C = 1 + rng.uniform_int(3),
                     H = 1 + rng.uniform_int(3), W = 1 + rng.uniform_int(3);
        auto x = TensorD::randn({N, C, H, W}, rng, 1.0);
        auto w = TensorD::randn({N, H * W, C}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(nchw_to_tokens(x, t), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("broadcast_row", [&](Rng& rng, OpReport& rep) {
        const size_t n = 1 + rng.uniform_int(4), d = 1 + rng.uniform_int(5);
        auto z = TensorD::randn({d}, rng, 1.0);
        auto w = TensorD::randn({n, d}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(broadcast_row(z, n, t), w, t); };
        absorb(rep, oracle::fd_check(z, fwd));
    });

    run("reshape_view", [&](Rng& rng, OpReport& rep) {
        auto x = TensorD::randn({2, 6}, rng, 1.0);
        auto w = TensorD::randn({3, 4}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(reshape(x, {3, 4}), w, t); };
        absorb(rep, oracle::fd_check(x, fwd));
    });

    run("grouped_gramian", [&](Rng& rng, OpReport& rep) {
        const size_t N = 1 + rng.uniform_int(2), S = 1 + rng.uniform_int(4);
        const size_t opts[] = {2, 4, 6};
        const size_t C = opts[rng.uniform_int(3)];
        size_t groups = 1 + rng.uniform_int(C);
        while (C % groups != 0) --groups;
        auto v = TensorD::randn({N, S, C}, rng, 1.0);
        const size_t G = C / groups;
        auto w = TensorD::randn({N, groups * G * G}, rng, 1.0);
        auto fwd = [&](TapeD* t) { return weighted_sum(grouped_gramian(v, groups, t), w, t); };
        absorb(rep, oracle::fd_check(v, fwd));
    });

    run("class_attention", [&](Rng& rng, OpReport& rep) {
        const size_t N = 1 + rng.uniform_int(2), S = 1 + rng.uniform_int(4);
        const size_t dims[] = {2, 4, 6};
        const size_t D = dims[rng.uniform_int(3)];
        size_t heads = 1 + rng.uniform_int(D);
        while (D % heads != 0) --heads;
        auto q = TensorD::randn({N, D}, rng, 1.0);
        auto k = TensorD::randn({N, S, D}, rng, 1.0);
        auto v = TensorD::randn({N, S, D}, rng, 1.0);
        auto w = TensorD::randn({N, D}, rng, 1.0);
        auto fwd = [&](TapeD* t) {
            return weighted_sum(class_attention_core(q, k, v, heads, t, nullptr), w, t);
        };
        absorb(rep, oracle::fd_check(q, fwd));
        absorb(rep, oracle::fd_check(k, fwd));
        absorb(rep, oracle::fd_check(v, fwd));
    });

    return out;
}

}  // namespace fdsuite

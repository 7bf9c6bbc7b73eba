#include "gram/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gram/kernels.hpp"

namespace gram {

namespace {

template <class T>
TensorT<T> make_out(Shape shape, bool needs_grad) {
    auto t = TensorT<T>::zeros(std::move(shape));
    if (needs_grad) t.set_requires_grad(true);
    return t;
}

// cols [C*k*k, Ho*Wo] from one image plane set x [C,H,W].
template <class T>
void im2col(const T* x, size_t C, size_t H, size_t W, size_t k, size_t stride, size_t pad,
            size_t Ho, size_t Wo, T* cols) {
    size_t row = 0;
    for (size_t c = 0; c < C; ++c) {
        for (size_t ki = 0; ki < k; ++ki) {
            for (size_t kj = 0; kj < k; ++kj, ++row) {
                T* crow = cols + row * (Ho * Wo);
                size_t idx = 0;
                for (size_t i = 0; i < Ho; ++i) {
                    const ptrdiff_t si = ptrdiff_t(i * stride + ki) - ptrdiff_t(pad);
                    if (si < 0 || si >= ptrdiff_t(H)) {
                        for (size_t j = 0; j < Wo; ++j) crow[idx++] = T(0);
                        continue;
                    }
                    const T* xrow = x + (c * H + size_t(si)) * W;
                    for (size_t j = 0; j < Wo; ++j) {
                        const ptrdiff_t sj = ptrdiff_t(j * stride + kj) - ptrdiff_t(pad);
                        crow[idx++] = (sj >= 0 && sj < ptrdiff_t(W)) ? xrow[sj] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add of a cols matrix back into one image plane set.
template <class T>
void col2im_add(const T* cols, size_t C, size_t H, size_t W, size_t k, size_t stride, size_t pad,
                size_t Ho, size_t Wo, T* dx) {
    size_t row = 0;
    for (size_t c = 0; c < C; ++c) {
        for (size_t ki = 0; ki < k; ++ki) {
            for (size_t kj = 0; kj < k; ++kj, ++row) {
                const T* crow = cols + row * (Ho * Wo);
                size_t idx = 0;
                for (size_t i = 0; i < Ho; ++i) {
                    const ptrdiff_t si = ptrdiff_t(i * stride + ki) - ptrdiff_t(pad);
                    if (si < 0 || si >= ptrdiff_t(H)) {
                        idx += Wo;
                        continue;
                    }
                    T* xrow = dx + (c * H + size_t(si)) * W;
                    for (size_t j = 0; j < Wo; ++j) {
                        const ptrdiff_t sj = ptrdiff_t(j * stride + kj) - ptrdiff_t(pad);
                        if (sj >= 0 && sj < ptrdiff_t(W)) xrow[sj] += crow[idx];
                        ++idx;
                    }
                }
            }
        }
    }
}

}  // namespace

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, std::type_identity_t<TapeT<T>*> tape) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    const size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    const bool track = tape && (a.requires_grad() || b.requires_grad());
    auto out = make_out<T>({m, p}, track);
    kern::gemm_nn(m, p, k, a.data(), b.data(), out.data(), false);
    GRAM_ASSERT_FINITE("matmul", out);
    if (track) {
        tape->record([a = a, b = b, out, m, k, p]() mutable {
            if (a.requires_grad()) kern::gemm_nt(m, k, p, out.grad(), b.data(), a.grad(), true);
            if (b.requires_grad()) kern::gemm_tn(k, p, m, a.data(), out.grad(), b.grad(), true);
        });
    }
    return out;
}

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, size_t stride, size_t padding,
                  std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw DimError("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) +
                       " and " + shape_str(w.shape()));
    const size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const size_t Co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != C)
        throw DimError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " kernel " +
                       shape_str(w.shape()));
    if (w.dim(3) != k || k % 2 == 0) throw ConfigError("conv2d: kernel must be square with odd side");
    if (padding != 0 && padding != (k - 1) / 2)
        throw ConfigError("conv2d: padding must be 0 or (k-1)/2");
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    const size_t Ho = (H + 2 * padding - k) / stride + 1;
    const size_t Wo = (W + 2 * padding - k) / stride + 1;
    const size_t ckk = C * k * k, hw = Ho * Wo;

    const bool track = tape && (x.requires_grad() || w.requires_grad());
    auto out = make_out<T>({N, Co, Ho, Wo}, track);
    std::vector<T> cols(ckk * hw);
    for (size_t n = 0; n < N; ++n) {
        im2col(x.data() + n * C * H * W, C, H, W, k, stride, padding, Ho, Wo, cols.data());
        kern::gemm_nn(Co, hw, ckk, w.data(), cols.data(), out.data() + n * Co * hw, false);
    }
    GRAM_ASSERT_FINITE("conv2d", out);
    if (track) {
        tape->record([x = x, w = w, out, stride, padding, N, C, H, W, Co, k, Ho, Wo, ckk, hw]() mutable {
            std::vector<T> cols(ckk * hw), dcols(ckk * hw);
            for (size_t n = 0; n < N; ++n) {
                const T* dy = out.grad() + n * Co * hw;
                if (w.requires_grad()) {
                    im2col(x.data() + n * C * H * W, C, H, W, k, stride, padding, Ho, Wo, cols.data());
                    kern::gemm_nt(Co, ckk, hw, dy, cols.data(), w.grad(), true);
                }
                if (x.requires_grad()) {
                    kern::gemm_tn(ckk, hw, Co, w.data(), dy, dcols.data(), false);
                    col2im_add(dcols.data(), C, H, W, k, stride, padding, Ho, Wo,
                               x.grad() + n * C * H * W);
                }
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> softmax(const TensorT<T>& x, size_t axis, std::type_identity_t<TapeT<T>*> tape) {
    if (axis >= x.ndim())
        throw DimError("softmax: axis " + std::to_string(axis) + " out of range for " +
                       shape_str(x.shape()));
    const size_t K = x.dim(axis);
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);

    const bool track = tape && x.requires_grad();
    auto out = make_out<T>(x.shape(), track);
    const T* xd = x.data();
    T* yd = out.data();
    for (size_t o = 0; o < outer; ++o) {
        for (size_t i = 0; i < inner; ++i) {
            const size_t base = o * K * inner + i;
            T mx = xd[base];
            for (size_t j = 1; j < K; ++j) mx = std::max(mx, xd[base + j * inner]);
            T denom = T(0);
            for (size_t j = 0; j < K; ++j) {
                const T e = std::exp(xd[base + j * inner] - mx);
                yd[base + j * inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (size_t j = 0; j < K; ++j) yd[base + j * inner] *= inv;
        }
    }
    GRAM_ASSERT_FINITE("softmax", out);
    if (track) {
        tape->record([x = x, out, outer, inner, K]() mutable {
            const T* y = out.data();
            const T* dy = out.grad();
            T* dx = x.grad();
            for (size_t o = 0; o < outer; ++o) {
                for (size_t i = 0; i < inner; ++i) {
                    const size_t base = o * K * inner + i;
                    T acc = T(0);
                    for (size_t j = 0; j < K; ++j) acc += dy[base + j * inner] * y[base + j * inner];
                    for (size_t j = 0; j < K; ++j) {
                        const size_t at = base + j * inner;
                        dx[at] += y[at] * (dy[at] - acc);
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       BnStats<T>& stats, BnMode mode, T momentum, T eps, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() != 4) throw DimError("batchnorm2d: expected 4-d input, got " + shape_str(x.shape()));
    const size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C)
        throw DimError("batchnorm2d: gamma/beta length " + std::to_string(gamma.numel()) + "/" +
                       std::to_string(beta.numel()) + " != channels " + std::to_string(C));
    const size_t hw = H * W, chw = C * hw;
    const size_t M = N * hw;

    if (mode == BnMode::eval && !stats.initialized)
        throw StateError("batchnorm2d: eval requested before any training step initialized running stats");
    if (stats.mean.empty()) {
        stats.mean.assign(C, T(0));
        stats.var.assign(C, T(1));
    }

    std::vector<T> mean(C), invstd(C);
    if (mode == BnMode::train) {
        for (size_t c = 0; c < C; ++c) {
            T s = T(0);
            for (size_t n = 0; n < N; ++n) s += kern::sum(hw, x.data() + n * chw + c * hw);
            mean[c] = s / T(M);
        }
        for (size_t c = 0; c < C; ++c) {
            T s = T(0);
            for (size_t n = 0; n < N; ++n) {
                const T* p = x.data() + n * chw + c * hw;
                for (size_t i = 0; i < hw; ++i) {
                    const T d = p[i] - mean[c];
                    s += d * d;
                }
            }
            const T var = s / T(M);
            invstd[c] = T(1) / std::sqrt(var + eps);
            stats.mean[c] = (T(1) - momentum) * stats.mean[c] + momentum * mean[c];
            stats.var[c] = (T(1) - momentum) * stats.var[c] + momentum * var;
        }
        stats.initialized = true;
    } else {
        for (size_t c = 0; c < C; ++c) {
            mean[c] = stats.mean[c];
            invstd[c] = T(1) / std::sqrt(stats.var[c] + eps);
        }
    }

    const bool track = tape && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    auto out = make_out<T>(x.shape(), track);
    for (size_t c = 0; c < C; ++c) {
        const T a = gamma.data()[c] * invstd[c];
        const T b = beta.data()[c] - a * mean[c];
        for (size_t n = 0; n < N; ++n) {
            const T* p = x.data() + n * chw + c * hw;
            T* q = out.data() + n * chw + c * hw;
            for (size_t i = 0; i < hw; ++i) q[i] = a * p[i] + b;
        }
    }
    GRAM_ASSERT_FINITE("batchnorm2d", out);

    if (track) {
        const bool batch_stats = (mode == BnMode::train);
        tape->record([x = x, gamma = gamma, beta = beta, out, mean, invstd, batch_stats, N, C, hw, chw, M]() mutable {
            for (size_t c = 0; c < C; ++c) {
                T sdy = T(0), sdyx = T(0);
                for (size_t n = 0; n < N; ++n) {
                    const T* dy = out.grad() + n * chw + c * hw;
                    const T* p = x.data() + n * chw + c * hw;
                    for (size_t i = 0; i < hw; ++i) {
                        sdy += dy[i];
                        sdyx += dy[i] * (p[i] - mean[c]) * invstd[c];
                    }
                }
                if (gamma.requires_grad()) gamma.grad()[c] += sdyx;
                if (beta.requires_grad()) beta.grad()[c] += sdy;
                if (x.requires_grad()) {
                    const T g = gamma.data()[c];
                    for (size_t n = 0; n < N; ++n) {
                        const T* dy = out.grad() + n * chw + c * hw;
                        const T* p = x.data() + n * chw + c * hw;
                        T* dx = x.grad() + n * chw + c * hw;
                        if (batch_stats) {
                            for (size_t i = 0; i < hw; ++i) {
                                const T xhat = (p[i] - mean[c]) * invstd[c];
                                dx[i] += g * invstd[c] * (dy[i] - sdy / T(M) - xhat * sdyx / T(M));
                            }
                        } else {
                            for (size_t i = 0; i < hw; ++i) dx[i] += g * invstd[c] * dy[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, std::type_identity_t<TapeT<T>*> tape) {
    if (a.shape() != b.shape())
        throw DimError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t n = a.numel();
    const bool track = tape && (a.requires_grad() || b.requires_grad());
    auto out = make_out<T>(a.shape(), track);
    kern::add(n, a.data(), b.data(), out.data());
    GRAM_ASSERT_FINITE("add", out);
    if (track) {
        tape->record([a = a, b = b, out, n]() mutable {
            if (a.requires_grad()) kern::axpy(n, T(1), out.grad(), a.grad());
            if (b.requires_grad()) kern::axpy(n, T(1), out.grad(), b.grad());
        });
    }
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, std::type_identity_t<TapeT<T>*> tape) {
    if (a.shape() != b.shape())
        throw DimError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t n = a.numel();
    const bool track = tape && (a.requires_grad() || b.requires_grad());
    auto out = make_out<T>(a.shape(), track);
    kern::mul(n, a.data(), b.data(), out.data());
    GRAM_ASSERT_FINITE("mul", out);
    if (track) {
        tape->record([a = a, b = b, out, n]() mutable {
            const T* dy = out.grad();
            if (a.requires_grad()) {
                T* da = a.grad();
                const T* bv = b.data();
                for (size_t i = 0; i < n; ++i) da[i] += dy[i] * bv[i];
            }
            if (b.requires_grad()) {
                T* db = b.grad();
                const T* av = a.data();
                for (size_t i = 0; i < n; ++i) db[i] += dy[i] * av[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T alpha, std::type_identity_t<TapeT<T>*> tape) {
    const size_t n = x.numel();
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>(x.shape(), track);
    kern::scale(n, alpha, x.data(), out.data());
    GRAM_ASSERT_FINITE("scale", out);
    if (track)
        tape->record([x = x, out, alpha, n]() mutable { kern::axpy(n, alpha, out.grad(), x.grad()); });
    return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape) {
    const size_t n = x.numel();
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>(x.shape(), track);
    kern::relu(n, x.data(), out.data());
    if (track)
        tape->record([x = x, out, n]() mutable { kern::relu_bwd(n, x.data(), out.grad(), x.grad()); });
    return out;
}

template <class T>
TensorT<T> log_clamped(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape) {
    const size_t n = x.numel();
    const T eps = T(kLogEps);
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>(x.shape(), track);
    for (size_t i = 0; i < n; ++i) out.data()[i] = std::log(std::max(x.data()[i], eps));
    GRAM_ASSERT_FINITE("log", out);
    if (track) {
        tape->record([x = x, out, n, eps]() mutable {
            const T* dy = out.grad();
            const T* xv = x.data();
            T* dx = x.grad();
            // clamped region is constant, so its gradient is zero
            for (size_t i = 0; i < n; ++i)
                if (xv[i] > eps) dx[i] += dy[i] / xv[i];
        });
    }
    return out;
}

template <class T>
TensorT<T> exp(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape) {
    const size_t n = x.numel();
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>(x.shape(), track);
    for (size_t i = 0; i < n; ++i) out.data()[i] = std::exp(x.data()[i]);
    GRAM_ASSERT_FINITE("exp", out);
    if (track) {
        tape->record([x = x, out, n]() mutable {
            const T* dy = out.grad();
            const T* y = out.data();
            T* dx = x.grad();
            for (size_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i];
        });
    }
    return out;
}

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
    return x.reshaped(std::move(shape));
}

template <class T>
TensorT<T> vectorize(const TensorT<T>& x) {
    return x.reshaped({x.numel()});
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape) {
    const size_t n = x.numel();
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>({1}, track);
    out.data()[0] = kern::sum(n, x.data());
    GRAM_ASSERT_FINITE("sum", out);
    if (track) {
        tape->record([x = x, out, n]() mutable {
            const T dy = out.grad()[0];
            T* dx = x.grad();
            for (size_t i = 0; i < n; ++i) dx[i] += dy;
        });
    }
    return out;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape) {
    const size_t n = x.numel();
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>({1}, track);
    out.data()[0] = kern::sum(n, x.data()) / T(n);
    GRAM_ASSERT_FINITE("mean", out);
    if (track) {
        tape->record([x = x, out, n]() mutable {
            const T dy = out.grad()[0] / T(n);
            T* dx = x.grad();
            for (size_t i = 0; i < n; ++i) dx[i] += dy;
        });
    }
    return out;
}

template <class T>
TensorT<T> sum_lastdim(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() < 1) throw DimError("sum_lastdim: scalar input");
    const size_t D = x.dim(x.ndim() - 1);
    const size_t R = x.numel() / D;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>(out_shape, track);
    for (size_t r = 0; r < R; ++r) out.data()[r] = kern::sum(D, x.data() + r * D);
    GRAM_ASSERT_FINITE("sum_lastdim", out);
    if (track) {
        tape->record([x = x, out, R, D]() mutable {
            T* dx = x.grad();
            const T* dy = out.grad();
            for (size_t r = 0; r < R; ++r)
                for (size_t d = 0; d < D; ++d) dx[r * D + d] += dy[r];
        });
    }
    return out;
}

template <class T>
TensorT<T> global_avg_pool(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() != 4) throw DimError("global_avg_pool: expected 4-d input, got " + shape_str(x.shape()));
    const size_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>({N, C}, track);
    for (size_t n = 0; n < N; ++n)
        for (size_t c = 0; c < C; ++c)
            out.data()[n * C + c] = kern::sum(hw, x.data() + (n * C + c) * hw) / T(hw);
    GRAM_ASSERT_FINITE("global_avg_pool", out);
    if (track) {
        tape->record([x = x, out, N, C, hw]() mutable {
            T* dx = x.grad();
            const T* dy = out.grad();
            for (size_t n = 0; n < N; ++n)
                for (size_t c = 0; c < C; ++c) {
                    const T g = dy[n * C + c] / T(hw);
                    T* slice = dx + (n * C + c) * hw;
                    for (size_t i = 0; i < hw; ++i) slice[i] += g;
                }
        });
    }
    return out;
}

template <class T>
TensorT<T> avg_pool2d(const TensorT<T>& x, size_t factor, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() != 4) throw DimError("avg_pool2d: expected 4-d input, got " + shape_str(x.shape()));
    const size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (factor == 0 || H % factor != 0 || W % factor != 0)
        throw ConfigError("avg_pool2d: factor " + std::to_string(factor) + " must divide " +
                          std::to_string(H) + "x" + std::to_string(W));
    const size_t Ho = H / factor, Wo = W / factor;
    const T inv = T(1) / T(factor * factor);
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>({N, C, Ho, Wo}, track);
    for (size_t nc = 0; nc < N * C; ++nc) {
        const T* p = x.data() + nc * H * W;
        T* q = out.data() + nc * Ho * Wo;
        for (size_t i = 0; i < Ho; ++i)
            for (size_t j = 0; j < Wo; ++j) {
                T s = T(0);
                for (size_t a = 0; a < factor; ++a)
                    for (size_t b = 0; b < factor; ++b) s += p[(i * factor + a) * W + j * factor + b];
                q[i * Wo + j] = s * inv;
            }
    }
    GRAM_ASSERT_FINITE("avg_pool2d", out);
    if (track) {
        tape->record([x = x, out, N, C, H, W, Ho, Wo, factor, inv]() mutable {
            T* dx = x.grad();
            const T* dy = out.grad();
            for (size_t nc = 0; nc < N * C; ++nc) {
                T* p = dx + nc * H * W;
                const T* q = dy + nc * Ho * Wo;
                for (size_t i = 0; i < Ho; ++i)
                    for (size_t j = 0; j < Wo; ++j) {
                        const T g = q[i * Wo + j] * inv;
                        for (size_t a = 0; a < factor; ++a)
                            for (size_t b = 0; b < factor; ++b)
                                p[(i * factor + a) * W + j * factor + b] += g;
                    }
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> mean_tokens(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() != 3) throw DimError("mean_tokens: expected 3-d input, got " + shape_str(x.shape()));
    const size_t N = x.dim(0), S = x.dim(1), D = x.dim(2);
    const T inv = T(1) / T(S);
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>({N, D}, track);
    for (size_t n = 0; n < N; ++n) {
        T* o = out.data() + n * D;
        for (size_t s = 0; s < S; ++s) kern::axpy(D, inv, x.data() + (n * S + s) * D, o);
    }
    GRAM_ASSERT_FINITE("mean_tokens", out);
    if (track) {
        tape->record([x = x, out, N, S, D, inv]() mutable {
            for (size_t n = 0; n < N; ++n) {
                const T* dy = out.grad() + n * D;
                for (size_t s = 0; s < S; ++s) kern::axpy(D, inv, dy, x.grad() + (n * S + s) * D);
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& b, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() < 1 || b.ndim() != 1 || x.dim(x.ndim() - 1) != b.dim(0))
        throw DimError("add_bias: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
    const size_t D = b.dim(0), R = x.numel() / D;
    const bool track = tape && (x.requires_grad() || b.requires_grad());
    auto out = make_out<T>(x.shape(), track);
    for (size_t r = 0; r < R; ++r)
        kern::add(D, x.data() + r * D, b.data(), out.data() + r * D);
    GRAM_ASSERT_FINITE("add_bias", out);
    if (track) {
        tape->record([x = x, b = b, out, R, D]() mutable {
            const T* dy = out.grad();
            if (x.requires_grad()) kern::axpy(R * D, T(1), dy, x.grad());
            if (b.requires_grad()) {
                T* db = b.grad();
                for (size_t r = 0; r < R; ++r)
                    for (size_t d = 0; d < D; ++d) db[d] += dy[r * D + d];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> pick_rows(const TensorT<T>& x, const std::vector<int>& labels, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() != 2) throw DimError("pick_rows: expected 2-d input, got " + shape_str(x.shape()));
    const size_t R = x.dim(0), K = x.dim(1);
    if (labels.size() != R)
        throw DimError("pick_rows: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(R) + " rows");
    for (size_t r = 0; r < R; ++r)
        if (labels[r] < 0 || size_t(labels[r]) >= K)
            throw ConfigError("pick_rows: label " + std::to_string(labels[r]) + " out of range [0, " +
                              std::to_string(K) + ")");
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>({R}, track);
    for (size_t r = 0; r < R; ++r) out.data()[r] = x.data()[r * K + size_t(labels[r])];
    if (track) {
        tape->record([x = x, out, labels, R, K]() mutable {
            T* dx = x.grad();
            const T* dy = out.grad();
            for (size_t r = 0; r < R; ++r) dx[r * K + size_t(labels[r])] += dy[r];
        });
    }
    return out;
}

template <class T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps,
                     std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() < 1) throw DimError("layernorm: scalar input");
    const size_t D = x.dim(x.ndim() - 1);
    if (gamma.numel() != D || beta.numel() != D)
        throw DimError("layernorm: gamma/beta length must equal last dim " + std::to_string(D));
    const size_t R = x.numel() / D;
    const bool track = tape && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    auto out = make_out<T>(x.shape(), track);
    std::vector<T> mean(R), invstd(R);
    for (size_t r = 0; r < R; ++r) {
        const T* p = x.data() + r * D;
        T mu = kern::sum(D, p) / T(D);
        T var = T(0);
        for (size_t d = 0; d < D; ++d) {
            const T dvp = p[d] - mu;
            var += dvp * dvp;
        }
        var /= T(D);
        mean[r] = mu;
        invstd[r] = T(1) / std::sqrt(var + eps);
        T* q = out.data() + r * D;
        for (size_t d = 0; d < D; ++d)
            q[d] = gamma.data()[d] * (p[d] - mu) * invstd[r] + beta.data()[d];
    }
    GRAM_ASSERT_FINITE("layernorm", out);
    if (track) {
        tape->record([x = x, gamma = gamma, beta = beta, out, mean, invstd, R, D]() mutable {
            for (size_t r = 0; r < R; ++r) {
                const T* p = x.data() + r * D;
                const T* dy = out.grad() + r * D;
                T sdxh = T(0), sdxhx = T(0);
                for (size_t d = 0; d < D; ++d) {
                    const T xhat = (p[d] - mean[r]) * invstd[r];
                    const T dxh = dy[d] * gamma.data()[d];
                    sdxh += dxh;
                    sdxhx += dxh * xhat;
                    if (gamma.requires_grad()) gamma.grad()[d] += dy[d] * xhat;
                    if (beta.requires_grad()) beta.grad()[d] += dy[d];
                }
                if (x.requires_grad()) {
                    T* dx = x.grad() + r * D;
                    for (size_t d = 0; d < D; ++d) {
                        const T xhat = (p[d] - mean[r]) * invstd[r];
                        const T dxh = dy[d] * gamma.data()[d];
                        dx[d] += invstd[r] * (dxh - sdxh / T(D) - xhat * sdxhx / T(D));
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> concat_token(const TensorT<T>& x, const TensorT<T>& t, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() != 3 || t.ndim() != 2 || x.dim(0) != t.dim(0) || x.dim(2) != t.dim(1))
        throw DimError("concat_token: tokens " + shape_str(x.shape()) + " with class token " +
                       shape_str(t.shape()));
    const size_t N = x.dim(0), S = x.dim(1), D = x.dim(2);
    const bool track = tape && (x.requires_grad() || t.requires_grad());
    auto out = make_out<T>({N, S + 1, D}, track);
    for (size_t n = 0; n < N; ++n) {
        std::memcpy(out.data() + n * (S + 1) * D, x.data() + n * S * D, S * D * sizeof(T));
        std::memcpy(out.data() + (n * (S + 1) + S) * D, t.data() + n * D, D * sizeof(T));
    }
    if (track) {
        tape->record([x = x, t = t, out, N, S, D]() mutable {
            const T* dy = out.grad();
            for (size_t n = 0; n < N; ++n) {
                if (x.requires_grad())
                    kern::axpy(S * D, T(1), dy + n * (S + 1) * D, x.grad() + n * S * D);
                if (t.requires_grad())
                    kern::axpy(D, T(1), dy + (n * (S + 1) + S) * D, t.grad() + n * D);
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> nchw_to_tokens(const TensorT<T>& x, std::type_identity_t<TapeT<T>*> tape) {
    if (x.ndim() != 4) throw DimError("nchw_to_tokens: expected 4-d input, got " + shape_str(x.shape()));
    const size_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    const bool track = tape && x.requires_grad();
    auto out = make_out<T>({N, hw, C}, track);
    for (size_t n = 0; n < N; ++n) {
        const T* p = x.data() + n * C * hw;
        T* q = out.data() + n * hw * C;
        for (size_t c = 0; c < C; ++c)
            for (size_t s = 0; s < hw; ++s) q[s * C + c] = p[c * hw + s];
    }
    if (track) {
        tape->record([x = x, out, N, C, hw]() mutable {
            T* dx = x.grad();
            const T* dy = out.grad();
            for (size_t n = 0; n < N; ++n) {
                T* p = dx + n * C * hw;
                const T* q = dy + n * hw * C;
                for (size_t c = 0; c < C; ++c)
                    for (size_t s = 0; s < hw; ++s) p[c * hw + s] += q[s * C + c];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> broadcast_row(const TensorT<T>& z, size_t n, std::type_identity_t<TapeT<T>*> tape) {
    if (z.ndim() != 1) throw DimError("broadcast_row: expected 1-d input, got " + shape_str(z.shape()));
    const size_t D = z.dim(0);
    const bool track = tape && z.requires_grad();
    auto out = make_out<T>({n, D}, track);
    for (size_t r = 0; r < n; ++r) std::memcpy(out.data() + r * D, z.data(), D * sizeof(T));
    if (track) {
        tape->record([z = z, out, n, D]() mutable {
            for (size_t r = 0; r < n; ++r) kern::axpy(D, T(1), out.grad() + r * D, z.grad());
        });
    }
    return out;
}

template <class T>
TensorT<T> grouped_gramian(const TensorT<T>& v, size_t groups, std::type_identity_t<TapeT<T>*> tape) {
    if (v.ndim() != 3) throw DimError("grouped_gramian: expected 3-d input, got " + shape_str(v.shape()));
    const size_t N = v.dim(0), S = v.dim(1), C = v.dim(2);
    if (groups == 0 || C % groups != 0)
        throw ConfigError("grouped_gramian: cardinality " + std::to_string(groups) +
                          " does not divide channel count " + std::to_string(C));
    const size_t G = C / groups;          // per-group width
    const size_t out_len = groups * G * G;
    const bool track = tape && v.requires_grad();
    auto out = make_out<T>({N, out_len}, track);
    std::vector<T> sub(S * G);
    for (size_t n = 0; n < N; ++n) {
        const T* vn = v.data() + n * S * C;
        for (size_t g = 0; g < groups; ++g) {
            for (size_t s = 0; s < S; ++s)
                std::memcpy(sub.data() + s * G, vn + s * C + g * G, G * sizeof(T));
            kern::gemm_tn(G, G, S, sub.data(), sub.data(), out.data() + n * out_len + g * G * G, false);
        }
    }
    GRAM_ASSERT_FINITE("grouped_gramian", out);
    if (track) {
        tape->record([v = v, out, N, S, C, G, groups, out_len]() mutable {
            std::vector<T> sub(S * G), sym(G * G), dsub(S * G);
            for (size_t n = 0; n < N; ++n) {
                const T* vn = v.data() + n * S * C;
                T* dvn = v.grad() + n * S * C;
                for (size_t g = 0; g < groups; ++g) {
                    const T* dg = out.grad() + n * out_len + g * G * G;
                    for (size_t a = 0; a < G; ++a)
                        for (size_t b = 0; b < G; ++b) sym[a * G + b] = dg[a * G + b] + dg[b * G + a];
                    for (size_t s = 0; s < S; ++s)
                        std::memcpy(sub.data() + s * G, vn + s * C + g * G, G * sizeof(T));
                    kern::gemm_nn(S, G, G, sub.data(), sym.data(), dsub.data(), false);
                    for (size_t s = 0; s < S; ++s)
                        for (size_t a = 0; a < G; ++a) dvn[s * C + g * G + a] += dsub[s * G + a];
                }
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> class_attention_core(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                size_t heads, std::type_identity_t<TapeT<T>*> tape, std::type_identity_t<TensorT<T>*> probs_out) {
    if (q.ndim() != 2 || k.ndim() != 3 || v.ndim() != 3)
        throw DimError("class_attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                       " v " + shape_str(v.shape()));
    const size_t N = q.dim(0), D = q.dim(1), S = k.dim(1);
    if (k.dim(0) != N || v.dim(0) != N || k.dim(2) != D || v.dim(2) != D || v.dim(1) != S)
        throw DimError("class_attention: inconsistent shapes q " + shape_str(q.shape()) + " k " +
                       shape_str(k.shape()) + " v " + shape_str(v.shape()));
    if (heads == 0 || D % heads != 0)
        throw ConfigError("class_attention: head count " + std::to_string(heads) +
                          " does not divide width " + std::to_string(D));
    const size_t Dh = D / heads;
    const T att_scale = T(1) / std::sqrt(T(Dh));

    const bool track = tape && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    auto out = make_out<T>({N, D}, track);
    auto probs = std::make_shared<std::vector<T>>(N * heads * S);
    std::vector<T> scores(S);
    for (size_t n = 0; n < N; ++n) {
        for (size_t a = 0; a < heads; ++a) {
            const T* qv = q.data() + n * D + a * Dh;
            for (size_t s = 0; s < S; ++s)
                scores[s] = att_scale * kern::dot(Dh, qv, k.data() + (n * S + s) * D + a * Dh);
            T mx = scores[0];
            for (size_t s = 1; s < S; ++s) mx = std::max(mx, scores[s]);
            T denom = T(0);
            T* p = probs->data() + (n * heads + a) * S;
            for (size_t s = 0; s < S; ++s) {
                p[s] = std::exp(scores[s] - mx);
                denom += p[s];
            }
            const T inv = T(1) / denom;
            T* o = out.data() + n * D + a * Dh;
            for (size_t s = 0; s < S; ++s) {
                p[s] *= inv;
                kern::axpy(Dh, p[s], v.data() + (n * S + s) * D + a * Dh, o);
            }
        }
    }
    GRAM_ASSERT_FINITE("class_attention", out);
    if (probs_out != nullptr)
        *probs_out = TensorT<T>::from({N, heads, S}, *probs);

    if (track) {
        tape->record([q = q, k = k, v = v, out, probs, N, D, S, heads, Dh, att_scale]() mutable {
            std::vector<T> dp(S), ds(S);
            for (size_t n = 0; n < N; ++n) {
                for (size_t a = 0; a < heads; ++a) {
                    const T* p = probs->data() + (n * heads + a) * S;
                    const T* dout = out.grad() + n * D + a * Dh;
                    const T* qv = q.data() + n * D + a * Dh;
                    T pdp = T(0);
                    for (size_t s = 0; s < S; ++s) {
                        dp[s] = kern::dot(Dh, v.data() + (n * S + s) * D + a * Dh, dout);
                        pdp += p[s] * dp[s];
                    }
                    for (size_t s = 0; s < S; ++s) ds[s] = p[s] * (dp[s] - pdp);
                    if (v.requires_grad())
                        for (size_t s = 0; s < S; ++s)
                            kern::axpy(Dh, p[s], dout, v.grad() + (n * S + s) * D + a * Dh);
                    if (q.requires_grad()) {
                        T* dq = q.grad() + n * D + a * Dh;
                        for (size_t s = 0; s < S; ++s)
                            kern::axpy(Dh, att_scale * ds[s], k.data() + (n * S + s) * D + a * Dh, dq);
                    }
                    if (k.requires_grad())
                        for (size_t s = 0; s < S; ++s)
                            kern::axpy(Dh, att_scale * ds[s], qv, k.grad() + (n * S + s) * D + a * Dh);
                }
            }
        });
    }
    return out;
}

#define GRAMNET_INSTANTIATE_OPS(T)                                                                  \
    template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);                 \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, size_t, size_t, TapeT<T>*); \
    template TensorT<T> softmax<T>(const TensorT<T>&, size_t, TapeT<T>*);                           \
    template TensorT<T> batchnorm2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,     \
                                       BnStats<T>&, BnMode, T, T, TapeT<T>*);                       \
    template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);                    \
    template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);                    \
    template TensorT<T> scale<T>(const TensorT<T>&, T, TapeT<T>*);                                  \
    template TensorT<T> relu<T>(const TensorT<T>&, TapeT<T>*);                                      \
    template TensorT<T> log_clamped<T>(const TensorT<T>&, TapeT<T>*);                               \
    template TensorT<T> exp<T>(const TensorT<T>&, TapeT<T>*);                                       \
    template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                                       \
    template TensorT<T> vectorize<T>(const TensorT<T>&);                                            \
    template TensorT<T> sum_all<T>(const TensorT<T>&, TapeT<T>*);                                   \
    template TensorT<T> mean_all<T>(const TensorT<T>&, TapeT<T>*);                                  \
    template TensorT<T> sum_lastdim<T>(const TensorT<T>&, TapeT<T>*);                               \
    template TensorT<T> global_avg_pool<T>(const TensorT<T>&, TapeT<T>*);                           \
    template TensorT<T> avg_pool2d<T>(const TensorT<T>&, size_t, TapeT<T>*);                        \
    template TensorT<T> mean_tokens<T>(const TensorT<T>&, TapeT<T>*);                               \
    template TensorT<T> add_bias<T>(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);               \
    template TensorT<T> pick_rows<T>(const TensorT<T>&, const std::vector<int>&, TapeT<T>*);        \
    template TensorT<T> layernorm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, T,    \
                                     TapeT<T>*);                                                    \
    template TensorT<T> concat_token<T>(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);           \
    template TensorT<T> nchw_to_tokens<T>(const TensorT<T>&, TapeT<T>*);                            \
    template TensorT<T> broadcast_row<T>(const TensorT<T>&, size_t, TapeT<T>*);                     \
    template TensorT<T> grouped_gramian<T>(const TensorT<T>&, size_t, TapeT<T>*);                   \
    template TensorT<T> class_attention_core<T>(const TensorT<T>&, const TensorT<T>&,               \
                                                const TensorT<T>&, size_t, TapeT<T>*, TensorT<T>*);

GRAMNET_INSTANTIATE_OPS(float)
GRAMNET_INSTANTIATE_OPS(double)
#undef GRAMNET_INSTANTIATE_OPS

}  // namespace gram

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "gram/error.hpp"
#include "gram/rng.hpp"

namespace gram {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
}

// Dense n-d array handle with value semantics on the handle and shared
// storage underneath. Reshapes alias both values and gradient, so a view
// participates in autodiff for free. Instantiated for float (training) and
// double (oracles and gradient checks).
template <class T>
class TensorT {
    struct Data {
        Shape shape;
        std::shared_ptr<std::vector<T>> values;
        std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
        bool requires_grad = false;
    };

  public:
    using value_type = T;

    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        TensorT t;
        t.p_ = std::make_shared<Data>();
        t.p_->shape = std::move(shape);
        t.p_->values = std::make_shared<std::vector<T>>(shape_numel(t.p_->shape), T(0));
        if (requires_grad) t.set_requires_grad(true);
        return t;
    }

    static TensorT full(Shape shape, T value, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& v : *t.p_->values) v = value;
        return t;
    }

    static TensorT from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw DimError("tensor init: shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
        TensorT t;
        t.p_ = std::make_shared<Data>();
        t.p_->shape = std::move(shape);
        t.p_->values = std::make_shared<std::vector<T>>(std::move(values));
        if (requires_grad) t.set_requires_grad(true);
        return t;
    }

    static TensorT randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& v : *t.p_->values) v = T(rng.normal()) * stddev;
        return t;
    }

    static TensorT scalar(T value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    size_t numel() const { return p_->values->size(); }
    size_t dim(size_t i) const { return p_->shape[i]; }
    size_t ndim() const { return p_->shape.size(); }

    T* data() { return p_->values->data(); }
    const T* data() const { return p_->values->data(); }
    std::vector<T>& values() { return *p_->values; }
    const std::vector<T>& values() const { return *p_->values; }

    bool requires_grad() const { return p_->requires_grad; }

    void set_requires_grad(bool flag) {
        p_->requires_grad = flag;
        if (flag && !p_->grad)
            p_->grad = std::make_shared<std::vector<T>>(p_->values->size(), T(0));
        if (!flag) p_->grad.reset();
    }

    T* grad() { return p_->grad ? p_->grad->data() : nullptr; }
    const T* grad() const { return p_->grad ? p_->grad->data() : nullptr; }
    std::vector<T>& grad_values() { return *p_->grad; }
    const std::vector<T>& grad_values() const { return *p_->grad; }

    void zero_grad() {
        if (p_->grad)
            for (auto& g : *p_->grad) g = T(0);
    }

    T item() const {
        if (numel() != 1) throw DimError("item(): tensor " + shape_str(shape()) + " is not scalar");
        return (*p_->values)[0];
    }

    // Aliasing view with a new shape. Values and grad are shared, so
    // gradient accumulation through a view needs no tape node.
    TensorT reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw DimError("reshape: cannot view " + shape_str(this->shape()) + " as " + shape_str(shape));
        TensorT t;
        t.p_ = std::make_shared<Data>();
        t.p_->shape = std::move(shape);
        t.p_->values = p_->values;
        t.p_->grad = p_->grad;
        t.p_->requires_grad = p_->requires_grad;
        return t;
    }

    // Deep copy, detached from any gradient flow.
    TensorT clone() const {
        TensorT t;
        t.p_ = std::make_shared<Data>();
        t.p_->shape = p_->shape;
        t.p_->values = std::make_shared<std::vector<T>>(*p_->values);
        return t;
    }

    // Storage identity: true when two handles alias the same value buffer.
    bool shares_storage_with(const TensorT& other) const {
        return p_ && other.p_ && p_->values == other.p_->values;
    }

    bool all_finite() const {
        for (T v : *p_->values)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

  private:
    std::shared_ptr<Data> p_;
};

// Ordered record of executed ops. Ops push their backward closure during
// the forward pass; backward() replays them in reverse exactly once.
template <class T>
class TapeT {
  public:
    void record(std::function<void()> back) { nodes_.push_back(std::move(back)); }

    void backward(const TensorT<T>& loss) {
        if (used_) throw StateError("tape already consumed by a backward pass");
        if (loss.numel() != 1)
            throw DimError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw StateError("backward: loss does not require grad (nothing on tape feeds it)");
        used_ = true;
        TensorT<T> l = loss;
        l.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    bool used() const { return used_; }
    size_t size() const { return nodes_.size(); }

  private:
    std::vector<std::function<void()>> nodes_;
    bool used_ = false;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using TensorD = TensorT<double>;
using TapeD = TapeT<double>;

#ifdef NDEBUG
#define GRAM_ASSERT_FINITE(op, tensor) ((void)0)
#else
#define GRAM_ASSERT_FINITE(op, tensor)                                               \
    do {                                                                             \
        if (!(tensor).all_finite())                                                  \
            throw gram::StateError(std::string(op) + ": non-finite values produced"); \
    } while (0)
#endif

}  // namespace gram

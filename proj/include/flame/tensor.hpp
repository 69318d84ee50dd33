#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"

namespace flame {

namespace detail {

inline std::string shape_string(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace detail

// Dense row-major tensor with an optional gradient buffer. Copies are
// shallow (shared storage); clone() makes a deep copy of the values.
// Value storage is allocated uninitialized: constructors that promise a
// fill do it explicitly, and every op writes its full output.
template <typename S>
class Tensor {
    struct Data {
        std::vector<int> shape;
        std::size_t numel = 0;
        std::unique_ptr<S[]> value;
        std::unique_ptr<S[]> grad;  // allocated lazily, zero-filled
        bool requires_grad = false;
    };

public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        Tensor t = uninitialized(std::move(shape), requires_grad);
        std::fill_n(t.data(), t.numel(), S(0));
        return t;
    }

    static Tensor full(std::vector<int> shape, S fill, bool requires_grad = false) {
        Tensor t = uninitialized(std::move(shape), requires_grad);
        std::fill_n(t.data(), t.numel(), fill);
        return t;
    }

    static Tensor uninitialized(std::vector<int> shape, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        std::size_t n = 1;
        for (int dim : t.d_->shape) {
            if (dim <= 0) throw ShapeError("tensor dimension must be positive, got " + detail::shape_string(t.d_->shape));
            n *= static_cast<std::size_t>(dim);
        }
        t.d_->numel = n;
        t.d_->value = std::make_unique_for_overwrite<S[]>(n);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(std::vector<int> shape, const std::vector<S>& values,
                       bool requires_grad = false) {
        Tensor t = uninitialized(std::move(shape), requires_grad);
        if (values.size() != t.numel())
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not fill shape " + detail::shape_string(t.shape()));
        std::copy(values.begin(), values.end(), t.data());
        return t;
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        Tensor t = uninitialized({1}, requires_grad);
        t.data()[0] = v;
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }

    const std::vector<int>& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return d_->numel; }

    S* data() { return d_->value.get(); }
    const S* data() const { return d_->value.get(); }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }

    bool has_grad() const { return d_ && d_->grad != nullptr; }

    // Allocates (zero-filled) the gradient buffer if absent.
    S* ensure_grad() {
        if (!d_->grad) {
            d_->grad = std::make_unique_for_overwrite<S[]>(d_->numel);
            std::fill_n(d_->grad.get(), d_->numel, S(0));
        }
        return d_->grad.get();
    }

    S* grad_data() { return d_->grad.get(); }
    const S* grad_data() const { return d_->grad.get(); }

    void zero_grad() {
        if (d_ && d_->grad) std::fill_n(d_->grad.get(), d_->numel, S(0));
    }

    void drop_grad() {
        if (d_) d_->grad.reset();
    }

    S item() const {
        if (numel() != 1) throw ContractError("item() requires a single-element tensor, shape is " + detail::shape_string(shape()));
        return data()[0];
    }

    Tensor clone() const {
        Tensor t = uninitialized(d_->shape, d_->requires_grad);
        std::copy_n(data(), numel(), t.data());
        return t;
    }

    void copy_values_from(const Tensor& other) {
        if (!same_shape(other))
            throw ShapeError("copy_values_from shape mismatch: " + detail::shape_string(shape()) +
                             " vs " + detail::shape_string(other.shape()));
        std::copy_n(other.data(), numel(), data());
    }

    bool same_shape(const Tensor& other) const { return d_->shape == other.d_->shape; }

    // Storage identity, used as a cache key by the ensemble forward.
    bool same_object(const Tensor& other) const { return d_ == other.d_; }
    const void* id() const { return d_.get(); }

private:
    std::shared_ptr<Data> d_;
};

// Reverse-mode tape. Ops that see at least one grad-requiring input record
// a backward closure; backward() seeds d(loss)/d(loss) = 1 and replays the
// closures in reverse. Gradients accumulate across calls: invoking
// backward() again without zeroing grads adds another full pass.
template <typename S>
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

    std::size_t size() const { return ops_.size(); }

    void backward(Tensor<S> loss) {
        if (loss.numel() != 1) throw ContractError("backward() requires a scalar loss");
        loss.ensure_grad()[0] += S(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void clear() { ops_.clear(); }

private:
    std::vector<std::function<void()>> ops_;
};

// True when an op must record a backward closure.
template <typename S>
inline bool tracing(const Tape<S>* tape, bool any_input_requires_grad) {
    return tape != nullptr && any_input_requires_grad;
}

}  // namespace flame

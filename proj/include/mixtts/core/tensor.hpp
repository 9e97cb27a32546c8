#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mixtts/core/common.hpp"
#include "mixtts/core/rng.hpp"

namespace mixtts {

// Tensors are value handles over shared row-major storage. Once an op has
// produced a tensor its values are never mutated again; gradients accumulate
// into a separate same-shape buffer during backward.
template <typename T>
struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // tape that produced this tensor (0 = leaf/detached)
};

template <typename T>
class Tensor {
  public:
    Tensor() : s_(std::make_shared<Storage<T>>()) {}

    explicit Tensor(Shape shape) : s_(std::make_shared<Storage<T>>()) {
        for (Index d : shape) require_shape(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
        s_->shape = std::move(shape);
        s_->values.assign(static_cast<std::size_t>(numel_of(s_->shape)), T(0));
    }

    Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<Storage<T>>()) {
        require_shape(numel_of(shape) == static_cast<Index>(values.size()),
                      "value count does not match shape " + shape_str(shape));
        s_->shape = std::move(shape);
        s_->values = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : t.s_->values) v = value;
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.s_->values) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, T mean = 0, T stddev = 1) {
        Tensor t(std::move(shape));
        for (auto& v : t.s_->values) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    const Shape& shape() const { return s_->shape; }
    Index dim(std::size_t i) const { return s_->shape.at(i); }
    std::size_t rank() const { return s_->shape.size(); }
    Index numel() const { return static_cast<Index>(s_->values.size()); }

    T* data() { return s_->values.data(); }
    const T* data() const { return s_->values.data(); }
    std::vector<T>& values() { return s_->values; }
    const std::vector<T>& values() const { return s_->values; }

    T& at(Index i) { return s_->values[static_cast<std::size_t>(i)]; }
    T at(Index i) const { return s_->values[static_cast<std::size_t>(i)]; }
    T& at(Index i, Index j) { return s_->values[static_cast<std::size_t>(i * dim(1) + j)]; }
    T at(Index i, Index j) const { return s_->values[static_cast<std::size_t>(i * dim(1) + j)]; }
    T& at(Index i, Index j, Index k) {
        return s_->values[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
    }
    T at(Index i, Index j, Index k) const {
        return s_->values[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
    }

    T item() const {
        require_shape(numel() == 1, "item() needs a scalar tensor, got " + shape_str(shape()));
        return s_->values[0];
    }

    bool requires_grad() const { return s_->requires_grad; }
    Tensor& set_requires_grad(bool flag = true) {
        s_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !s_->grad.empty(); }

    // Grad buffer, allocated zero-filled on first touch.
    std::vector<T>& grad() {
        if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
        return s_->grad;
    }
    const std::vector<T>& grad_view() const { return s_->grad; }

    void zero_grad() { s_->grad.clear(); }

    std::uint64_t tape_id() const { return s_->tape_id; }
    void set_tape_id(std::uint64_t id) { s_->tape_id = id; }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

    // Value copy that does not participate in any gradient flow.
    Tensor detached_copy() const {
        Tensor t;
        t.s_->shape = s_->shape;
        t.s_->values = s_->values;
        return t;
    }

  private:
    std::shared_ptr<Storage<T>> s_;
};

// Records backward closures in execution order. Reverse replay is a valid
// topological order because inputs always exist before the op that consumes
// them.
template <typename T>
class Tape {
  public:
    Tape() : id_(next_id()) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t id() const { return id_; }

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return nodes_.size(); }

    void backward(Tensor<T> loss) {
        require_shape(loss.numel() == 1,
                      "backward requires a scalar loss, got " + shape_str(loss.shape()));
        if (loss.tape_id() != id_)
            throw ShapeError("backward called on a loss that is detached from this tape");
        if (consumed_) throw Error("tape already consumed by a previous backward call");
        consumed_ = true;
        loss.grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

  private:
    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    std::vector<std::function<void()>> nodes_;
    std::uint64_t id_;
    bool consumed_ = false;
};

}  // namespace mixtts

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace trendmatch {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Raised when tensor extents disagree. `axis()` names the offending axis,
/// or -1 when the rank itself is wrong.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(std::string op, int axis, const std::string& detail)
        : std::invalid_argument(op + ": dimension mismatch" +
                                (axis >= 0 ? " on axis " + std::to_string(axis) : std::string(" in rank")) +
                                ": " + detail),
          op_(std::move(op)), axis_(axis) {}

    const std::string& op() const noexcept { return op_; }
    int axis() const noexcept { return axis_; }

private:
    std::string op_;
    int axis_;
};

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a gradient reaches this tensor
    bool requires_grad = false;
};

/// Dense row-major tensor with an optional gradient slot.
///
/// Copies share storage (handle semantics), which is what lets the two Siamese
/// streams reference one set of parameters. Use `clone()` for a deep copy.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : impl_(std::make_shared<TensorStorage<T>>()) {
        impl_->value.assign(shape_numel(shape), fill);
        impl_->shape = std::move(shape);
        impl_->requires_grad = requires_grad;
    }

    BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : impl_(std::make_shared<TensorStorage<T>>()) {
        if (values.size() != shape_numel(shape)) {
            throw ShapeError("tensor", -1,
                             "shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                                 " values, got " + std::to_string(values.size()));
        }
        impl_->shape = std::move(shape);
        impl_->value = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    static BasicTensor parameter(Shape shape, T fill = T(0)) { return BasicTensor(std::move(shape), fill, true); }

    static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

    bool defined() const noexcept { return static_cast<bool>(impl_); }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->value.size(); }

    std::span<T> data() { return impl_->value; }
    std::span<const T> data() const { return impl_->value; }
    T& operator[](std::size_t i) { return impl_->value[i]; }
    const T& operator[](std::size_t i) const { return impl_->value[i]; }

    /// Element of a rank-4 tensor.
    T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        const auto& s = impl_->shape;
        return impl_->value[((n * s[1] + c) * s[2] + y) * s[3] + x];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        const auto& s = impl_->shape;
        return impl_->value[((n * s[1] + c) * s[2] + y) * s[3] + x];
    }

    T item() const {
        if (numel() != 1) {
            throw ShapeError("item", -1, "expected one element, tensor is " + shape_str(shape()));
        }
        return impl_->value[0];
    }

    bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

    bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }

    /// Gradient buffer, allocated (zero-filled) on first access. Like the
    /// storage it lives in, the gradient is shared by all handle copies.
    std::span<T> grad() const {
        if (impl_->grad.empty()) {
            impl_->grad.assign(impl_->value.size(), T(0));
        }
        return impl_->grad;
    }

    void zero_grad() const { impl_->grad.clear(); }

    BasicTensor clone() const {
        BasicTensor out(impl_->shape, impl_->value, false);
        return out;
    }

    /// Same values converted to another scalar type, detached from any graph.
    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> v(impl_->value.begin(), impl_->value.end());
        return BasicTensor<U>(impl_->shape, std::move(v));
    }

    bool same_storage(const BasicTensor& other) const noexcept { return impl_ == other.impl_; }

    const std::shared_ptr<TensorStorage<T>>& storage() const noexcept { return impl_; }

private:
    std::shared_ptr<TensorStorage<T>> impl_;
};

using Tensor = BasicTensor<float>;

// ---------------------------------------------------------------------------
// Tape

/// Thread-local record of executed operations. Each entry is a closure that
/// propagates the gradient of one op's output into its inputs; backward runs
/// them in exact reverse order of recording.
template <typename T>
class Tape {
public:
    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
    std::size_t size() const noexcept { return steps_.size(); }
    void clear() { steps_.clear(); }

    void run_backward() {
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
            (*it)();
        }
        steps_.clear();
    }

private:
    std::vector<std::function<void()>> steps_;
};

template <typename T>
Tape<T>& current_tape() {
    thread_local Tape<T> tape;
    return tape;
}

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// True when an op over `inputs` has to be recorded.
template <typename T>
bool needs_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
    if (!grad_enabled()) {
        return false;
    }
    for (const auto* t : inputs) {
        if (t && t->defined() && t->requires_grad()) {
            return true;
        }
    }
    return false;
}

/// Records `step` on the current tape and marks `out` as differentiable.
/// The closure runs only if a gradient actually reached `out`.
template <typename T, typename Fn>
void record_op(BasicTensor<T>& out, Fn&& step) {
    out.set_requires_grad(true);
    std::weak_ptr<TensorStorage<T>> weak = out.storage();
    current_tape<T>().record([weak, fn = std::forward<Fn>(step)]() mutable {
        auto o = weak.lock();
        if (!o || o->grad.empty()) {
            return;
        }
        fn(std::span<const T>(o->grad));
    });
}

/// Reverse pass from a scalar loss: seeds d(loss)/d(loss) = 1, replays the
/// tape backwards, then clears it. Gradients accumulate into `grad()`.
template <typename T>
void backward(BasicTensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward", -1, "loss must be scalar, got " + shape_str(loss.shape()));
    }
    loss.grad()[0] += T(1);
    current_tape<T>().run_backward();
}

/// Accumulates `src` into the gradient of `dst` when `dst` participates in autodiff.
template <typename T>
void accumulate_grad(const BasicTensor<T>& dst, std::span<const T> src) {
    if (!dst.requires_grad()) {
        return;
    }
    auto g = dst.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += src[i];
    }
}

}  // namespace trendmatch

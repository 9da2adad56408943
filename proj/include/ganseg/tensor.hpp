#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ganseg {

/// Dense 4-D shape in (batch, channels, height, width) order.
struct Shape4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << n << "x" << c << "x" << h << "x" << w;
        return os.str();
    }
};

inline void check_shape_valid(const Shape4& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
        throw std::invalid_argument("negative dimension in shape " + s.str());
    }
}

/// Dense 4-D float tensor with shared value storage, an optional gradient
/// buffer (leaves only) and a transient handle into the active Tape.
///
/// Copies are shallow: they alias the same value/grad buffers. Buffers are
/// written only at creation, by the optimizer, and by Tape::backward (grad).
template <typename S>
class Tensor {
  public:
    using Scalar = S;
    using ArrayMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
    using ConstArrayMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

    Tensor() = default;

    explicit Tensor(Shape4 shape, S fill = S(0)) : shape_(shape) {
        check_shape_valid(shape);
        values_ = std::make_shared<std::vector<S>>(shape.numel(), fill);
    }

    static Tensor from_values(Shape4 shape, std::vector<S> values) {
        check_shape_valid(shape);
        if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
            throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                        " does not match shape " + shape.str());
        }
        Tensor t;
        t.shape_ = shape;
        t.values_ = std::make_shared<std::vector<S>>(std::move(values));
        return t;
    }

    static Tensor scalar_tensor(S v) { return from_values({1, 1, 1, 1}, {v}); }

    const Shape4& shape() const { return shape_; }
    std::int64_t size() const { return shape_.numel(); }
    bool empty() const { return !values_ || values_->empty(); }

    S* data() { return values_->data(); }
    const S* data() const { return values_->data(); }
    const std::shared_ptr<std::vector<S>>& storage() const { return values_; }

    ArrayMap array() { return ArrayMap(values_->data(), size()); }
    ConstArrayMap array() const { return ConstArrayMap(values_->data(), size()); }

    S& at(int n, int c, int h, int w) {
        return (*values_)[index(n, c, h, w)];
    }
    S at(int n, int c, int h, int w) const {
        return (*values_)[index(n, c, h, w)];
    }

    std::int64_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::int64_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    /// Value of a 1-element tensor.
    S item() const {
        if (size() != 1) {
            throw std::invalid_argument("item() on non-scalar tensor of shape " + shape_.str());
        }
        return (*values_)[0];
    }

    bool all_finite() const {
        return array().isFinite().all();
    }

    // --- gradient buffer (leaf parameters) ---

    bool has_grad() const { return static_cast<bool>(grad_); }

    void ensure_grad() {
        if (!grad_) grad_ = std::make_shared<std::vector<S>>(size(), S(0));
    }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), S(0));
    }
    void drop_grad() { grad_.reset(); }

    S* grad_data() { return grad_ ? grad_->data() : nullptr; }
    const S* grad_data() const { return grad_ ? grad_->data() : nullptr; }
    const std::shared_ptr<std::vector<S>>& grad_storage() const { return grad_; }

    ArrayMap grad_array() {
        if (!grad_) throw std::runtime_error("gradient buffer not allocated");
        return ArrayMap(grad_->data(), size());
    }
    ConstArrayMap grad_array() const {
        if (!grad_) throw std::runtime_error("gradient buffer not allocated");
        return ConstArrayMap(grad_->data(), size());
    }

    /// Deep copy of values (fresh storage, no grad, no node).
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.values_ = std::make_shared<std::vector<S>>(*values_);
        return t;
    }

    template <typename T>
    Tensor<T> cast() const {
        std::vector<T> v(size());
        for (std::int64_t i = 0; i < size(); ++i) v[i] = static_cast<T>((*values_)[i]);
        return Tensor<T>::from_values(shape_, std::move(v));
    }

    // --- tape handle (transient, per forward recording) ---
    // A handle is only meaningful on the tape that issued it; resolving
    // against any other tape yields -1, so stale handles cannot leak
    // gradients into a later recording.

    int node() const { return node_; }
    void set_node(int id, std::uint64_t tape_id) {
        node_ = id;
        node_tape_ = tape_id;
    }
    int node_on(std::uint64_t tape_id) const { return node_tape_ == tape_id ? node_ : -1; }

  private:
    Shape4 shape_{};
    std::shared_ptr<std::vector<S>> values_;
    std::shared_ptr<std::vector<S>> grad_;
    int node_ = -1;
    std::uint64_t node_tape_ = 0;
};

using TensorF = Tensor<float>;

}  // namespace ganseg

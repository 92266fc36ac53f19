#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace m3f::ad {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
    std::uint64_t id = 0;
    Shape shape;
    std::vector<float> value;
    // Empty until something accumulates into it; an empty buffer reads as zeros.
    std::vector<float> grad;
    bool requires_grad = false;
    bool leaf = true;
    // Bumped by Tensor::mutable_values(); keys the transposed-value cache.
    std::uint64_t version = 0;
    std::vector<float> transposed;
    std::uint64_t transposed_version = ~std::uint64_t{0};

    std::vector<float>& grad_buffer() {
        if (grad.empty()) {
            grad.assign(value.size(), 0.0f);
        }
        return grad;
    }
};

std::uint64_t next_node_id();

}  // namespace detail

/// Reference-counted handle to a dense row-major float32 array.
///
/// Copies share storage. Values are treated as immutable once produced by an
/// op; only leaves (parameters, inputs) expose mutable values, which the
/// optimizer and finite-difference checks use.
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, float value, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return node_->value.size(); }
    // 2D conveniences; higher ranks fold trailing axes into cols().
    std::size_t rows() const { return node_->shape.front(); }
    std::size_t cols() const { return size() / rows(); }

    std::span<const float> values() const { return node_->value; }
    // Each call invalidates cached derived data, so write through a fresh
    // span rather than holding one across ops that read this tensor.
    std::span<float> mutable_values();
    float item() const;
    float at(std::size_t row, std::size_t col) const { return node_->value[row * cols() + col]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag);
    bool is_leaf() const { return node_->leaf; }

    bool has_grad() const { return !node_->grad.empty(); }
    // Empty span when nothing has been accumulated.
    std::span<const float> grad() const { return node_->grad; }
    std::span<float> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    std::uint64_t id() const { return node_->id; }

    // New leaf with copied values and no gradient history.
    Tensor detach() const;
    Tensor clone(bool requires_grad) const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    friend Tensor make_result(Shape, std::vector<float>, bool);

    std::shared_ptr<detail::Node> node_;
};

// Non-leaf constructor used by ops.
Tensor make_result(Shape shape, std::vector<float> values, bool requires_grad);

/// Ordered record of differentiable operations for reverse-mode AD.
///
/// One tape per thread. A non-recording tape evaluates ops without building
/// history, which is how inference and finite-difference probes run.
class Tape {
public:
    struct Entry {
        std::string_view op;
        std::vector<std::uint64_t> inputs;
        std::uint64_t output;
        std::function<void()> backward;
    };

    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }

    // True when an op over these inputs must be recorded.
    bool wants(std::initializer_list<const Tensor*> inputs) const;
    bool wants(std::span<const Tensor> inputs) const;

    void record(std::string_view op, std::vector<std::uint64_t> inputs, const Tensor& output,
                std::function<void()> backward);

    /// Populates dLoss/dLeaf for every reachable leaf with requires_grad.
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// reset at the start of each call.
    void backward(const Tensor& loss);

    std::size_t size() const { return entries_.size(); }
    std::span<const Entry> entries() const { return entries_; }
    void clear();

private:
    bool recording_;
    std::vector<Entry> entries_;
    std::vector<std::shared_ptr<detail::Node>> outputs_;
};

}  // namespace m3f::ad

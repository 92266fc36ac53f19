#include "autodiff/tensor.hpp"

#include <atomic>

#include <fmt/format.h>

#include "common/error.hpp"

namespace m3f::ad {

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            out += "x";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

namespace detail {

std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<float> values, bool requires_grad,
                                       bool leaf) {
    if (shape.empty()) {
        fail(ErrorKind::dimension, "tensor rank must be at least 1");
    }
    for (auto d : shape) {
        if (d == 0) {
            fail(ErrorKind::dimension, "tensor dimensions must be positive, got " + shape_string(shape));
        }
    }
    if (element_count(shape) != values.size()) {
        fail(ErrorKind::dimension, fmt::format("shape {} holds {} values, got {}", shape_string(shape),
                                               element_count(shape), values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->id = detail::next_node_id();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->leaf = leaf;
    return node;
}

}  // namespace

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    return Tensor(new_node(std::move(shape), std::move(values), requires_grad, true));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = element_count(shape);
    return from(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::filled(Shape shape, float value, bool requires_grad) {
    const auto n = element_count(shape);
    return from(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor make_result(Shape shape, std::vector<float> values, bool requires_grad) {
    return Tensor(new_node(std::move(shape), std::move(values), requires_grad, false));
}

std::span<float> Tensor::mutable_values() {
    if (!node_->leaf) {
        fail(ErrorKind::usage, "only leaf tensors expose mutable values");
    }
    ++node_->version;
    return node_->value;
}

float Tensor::item() const {
    if (size() != 1) {
        fail(ErrorKind::dimension, "item() on tensor of shape " + shape_string(shape()));
    }
    return node_->value[0];
}

void Tensor::set_requires_grad(bool flag) {
    if (!node_->leaf) {
        fail(ErrorKind::usage, "requires_grad can only be toggled on leaves");
    }
    node_->requires_grad = flag;
    if (!flag) {
        node_->grad.clear();
    }
}

Tensor Tensor::detach() const {
    return from(node_->shape, node_->value, false);
}

Tensor Tensor::clone(bool requires_grad) const {
    return from(node_->shape, node_->value, requires_grad);
}

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t != nullptr && t->defined() && t->requires_grad()) {
            return true;
        }
    }
    return false;
}

bool Tape::wants(std::span<const Tensor> inputs) const {
    if (!recording_) {
        return false;
    }
    for (const Tensor& t : inputs) {
        if (t.requires_grad()) {
            return true;
        }
    }
    return false;
}

void Tape::record(std::string_view op, std::vector<std::uint64_t> inputs, const Tensor& output,
                  std::function<void()> backward) {
    entries_.push_back(Entry{op, std::move(inputs), output.id(), std::move(backward)});
    outputs_.push_back(output.node());
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        fail(ErrorKind::usage, "backward requires a scalar loss, got shape " +
                                   (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    }
    std::size_t loss_entry = entries_.size();
    for (std::size_t i = entries_.size(); i-- > 0;) {
        if (entries_[i].output == loss.id()) {
            loss_entry = i;
            break;
        }
    }
    if (loss_entry == entries_.size()) {
        fail(ErrorKind::usage, "loss tensor was not produced on this tape");
    }
    for (auto& node : outputs_) {
        node->grad.clear();
    }
    outputs_[loss_entry]->grad_buffer()[0] = 1.0f;
    for (std::size_t i = loss_entry + 1; i-- > 0;) {
        if (!outputs_[i]->grad.empty()) {
            entries_[i].backward();
        }
    }
}

void Tape::clear() {
    entries_.clear();
    outputs_.clear();
}

}  // namespace m3f::ad

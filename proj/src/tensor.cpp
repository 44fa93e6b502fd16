#include "mnas/tensor.hpp"

#include <utility>

namespace mnas {

size_t Tensor::shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) {
            throw ShapeError("negative extent in shape");
        }
        n *= static_cast<size_t>(d);
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape, double fill, bool requires_grad) {
    node_ = std::make_shared<TensorData>();
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), fill);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("data length does not match shape");
    }
    Tensor t;
    t.node_ = std::make_shared<TensorData>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

double Tensor::item() const {
    if (!is_scalar()) {
        throw ShapeError("item() on non-scalar tensor");
    }
    return node_->data[0];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.node_ = std::make_shared<TensorData>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    t.node_->requires_grad = node_->requires_grad;
    return t;
}

void Tape::record(const Tensor& out, Step step) {
    out.node()->tape = this;
    steps_.push_back(std::move(step));
}

void Tape::note_leaf(const Tensor& leaf) {
    TensorData* node = leaf.node();
    if (leaf_seen_.insert(node).second) {
        leaves_.push_back(leaf.handle());
    }
}

std::vector<double>& Tape::grad_buffer(TensorData* node) {
    if (node->grad.empty()) {
        node->grad.assign(node->data.size(), 0.0);
        touched_.push_back(node);
    }
    return node->grad;
}

GradMap Tape::backward(const Tensor& loss) {
    if (!loss.defined() || !loss.is_scalar()) {
        throw ShapeError("backward() needs a scalar loss");
    }
    if (loss.node()->tape != this) {
        throw std::invalid_argument("backward() loss was not recorded on this tape");
    }
    grad_buffer(loss.node())[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        (*it)();
    }
    GradMap grads;
    grads.reserve(leaves_.size());
    for (const auto& leaf : leaves_) {
        Tensor g(leaf->shape, 0.0, false);
        if (!leaf->grad.empty()) {
            g.data() = leaf->grad;
        }
        check_finite(g.data(), "backward gradient");
        grads.emplace(leaf.get(), std::move(g));
    }
    for (TensorData* node : touched_) {
        node->grad.clear();
        node->grad.shrink_to_fit();
    }
    touched_.clear();
    return grads;
}

}  // namespace mnas

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mnas/common.hpp"
#include "mnas/rng.hpp"

namespace mnas {

class Tape;

// Dense f64 tensor node, NCHW for image data. Nodes produced by taped ops
// remember the tape they were recorded on; leaf parameters have tape == null.
struct TensorData {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily during backward
    bool requires_grad = false;
    const Tape* tape = nullptr;
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return node_->data.size(); }
    bool is_scalar() const { return numel() == 1; }
    double item() const;

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    // Deep copy; the copy is a fresh leaf.
    Tensor clone() const;

    TensorData* node() const { return node_.get(); }
    std::shared_ptr<TensorData> handle() const { return node_; }

    static size_t shape_numel(const std::vector<int>& shape);

  private:
    std::shared_ptr<TensorData> node_;
};

using GradMap = std::unordered_map<const TensorData*, Tensor>;

// Wengert-list reverse-mode tape. Ops append their backward step in execution
// order; backward() replays the list in reverse. The tape is rebuilt for
// every forward pass, which keeps variable cell topologies trivial.
class Tape {
  public:
    using Step = std::function<void()>;

    // Called by ops: marks `out` as produced here and appends its backward step.
    void record(const Tensor& out, Step step);

    // Called by ops for every differentiable leaf input they consume.
    void note_leaf(const Tensor& leaf);

    // Accumulation buffer for a node, zero-initialised on first touch.
    std::vector<double>& grad_buffer(TensorData* node);

    bool has(const Tensor& t) const { return t.defined() && t.node()->tape == this; }

    // Runs reverse-mode accumulation from a scalar loss recorded on this
    // tape. Returns gradients for every leaf that participated; all grad
    // buffers are released afterwards so parameters stay clean between steps.
    GradMap backward(const Tensor& loss);

    size_t size() const { return steps_.size(); }

  private:
    std::vector<Step> steps_;
    std::vector<std::shared_ptr<TensorData>> leaves_;
    std::unordered_set<TensorData*> leaf_seen_;
    std::vector<TensorData*> touched_;
};

}  // namespace mnas

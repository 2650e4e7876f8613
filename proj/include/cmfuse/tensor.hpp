#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/rng.hpp"

namespace cmfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense tensor of 64-bit floats, row-major. A Tensor is a shared handle to its
// storage node: copies alias, so parameters updated in place by the optimizer
// are seen by every holder. Gradients live on the node and accumulate
// additively during a backward pass.
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), 0.0);
  }

  static Tensor full(Shape shape, double value) {
    return Tensor(std::move(shape), value);
  }

  static Tensor scalar(double value) {
    Tensor t({1}, value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) {
      throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " needs " +
                                  std::to_string(shape_numel(shape)) + " values, got " +
                                  std::to_string(values.size()));
    }
    Tensor t(std::move(shape), 0.0);
    t.node_->data = std::move(values);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.node_->data) v = rng.next_normal(0.0, stddev);
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& values() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  // 2-D element access (row-major).
  double& at(std::size_t r, std::size_t c) { return node_->data[r * node_->shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape[1] + c]; }

  double value() const {
    if (numel() != 1) {
      throw std::invalid_argument("Tensor::value: tensor " + shape_str(shape()) + " is not scalar");
    }
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<double>& grad() {
    ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    if (node_->grad.empty()) {
      throw std::runtime_error("Tensor::grad: gradient not populated; run backward first");
    }
    return node_->grad;
  }

  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  }

  void zero_grad() { node_->grad.clear(); }

  // Deep copy; the clone shares nothing with the source.
  Tensor clone() const {
    Tensor t(node_->shape, 0.0);
    t.node_->data = node_->data;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  Tensor(Shape shape, double fill) : node_(std::make_shared<Node>()) {
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), fill);
  }

  std::shared_ptr<Node> node_;
};

// Reverse-mode tape. Ops append one entry per recorded operation; entries are
// in topological order by construction (an operand always exists before the
// op that consumes it). The tape is single-use: a second backward throws.
//
// At most one tape is active per thread; ops record onto the active tape only
// when their output requires grad. With no active tape, ops run pure forward.
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> backward_step) {
    steps_.push_back(std::move(backward_step));
  }

  std::size_t size() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = 1 and walks the recorded ops once, in reverse.
  void backward(Tensor loss) {
    if (loss.numel() != 1) {
      throw std::invalid_argument("Tape::backward: loss must be scalar, got " +
                                  shape_str(loss.shape()));
    }
    if (consumed_) {
      throw std::runtime_error("Tape::backward: tape already consumed; build a fresh tape per forward pass");
    }
    consumed_ = true;
    loss.ensure_grad();
    loss.grad()[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
  inline static thread_local Tape* active_ = nullptr;
};

}  // namespace cmfuse

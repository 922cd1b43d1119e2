#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cct {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<size_t>;

std::string shape_str(const Shape& s);
size_t shape_numel(const Shape& s);

class Tape;

// Dense row-major float64 tensor. When `tape` is set the tensor participates
// in reverse-mode differentiation through node id `node`; a tensor without a
// tape is a constant (this is the stop-gradient boundary).
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, std::shared_ptr<std::vector<double>> d) : shape(std::move(s)), data(std::move(d)) {}

  size_t size() const { return data ? data->size() : 0; }
  size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  bool tracked() const { return tape != nullptr && node >= 0; }

  double& at(size_t i) { return (*data)[i]; }
  double at(size_t i) const { return (*data)[i]; }
  double& at(size_t i, size_t j) { return (*data)[i * shape[1] + j]; }
  double at(size_t i, size_t j) const { return (*data)[i * shape[1] + j]; }

  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }

  // Scalar extraction; requires size() == 1.
  double item() const;
};

Tensor zeros(Shape s);
Tensor full(Shape s, double v);
Tensor from_values(Shape s, std::vector<double> v);

// Shares data, drops tape membership. The producer of `t` is unreachable from
// anything computed on the result.
Tensor detach(const Tensor& t);

// Deep copy, untracked.
Tensor clone(const Tensor& t);

// Reverse-mode tape. Nodes are recorded in forward (topological) order;
// backward() walks them exactly once in reverse, accumulating gradients.
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& gout, Tape& tape)>;

  int record(size_t out_size, BackwardFn fn) {
    nodes_.push_back(Node{out_size, std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Gradient buffer for a node, allocated (zero-filled) on first access.
  std::vector<double>& grad(int node) {
    auto& g = grads_[static_cast<size_t>(node)];
    if (g.empty()) g.assign(nodes_[static_cast<size_t>(node)].out_size, 0.0);
    return g;
  }

  bool has_grad(int node) const { return !grads_[static_cast<size_t>(node)].empty(); }

  // Seeds d(root)/d(root) = 1 and propagates to all reachable nodes.
  void backward(const Tensor& root);

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    size_t out_size;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// Learnable tensor with a stable name and a gradient accumulator that
// persists across tape lifetimes.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.size(), 0.0) {}

  // Registers this parameter as a leaf on `tape` (when non-null) so that
  // backward() adds into `grad`. Returns the tensor to use in the forward.
  Tensor use(Tape* tape);

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  double grad_norm() const;
};

// Asserts both inputs live on the same tape (or are constants); returns the
// tape the result should record on, possibly null.
Tape* result_tape(const Tensor& a, const Tensor& b);

}  // namespace cct

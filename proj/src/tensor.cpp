#include "cct/tensor.hpp"

#include <cmath>
#include <sstream>

namespace cct {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t e : s) n *= e;
  return n;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
  return (*data)[0];
}

Tensor zeros(Shape s) {
  size_t n = shape_numel(s);
  return Tensor(std::move(s), std::make_shared<std::vector<double>>(n, 0.0));
}

Tensor full(Shape s, double v) {
  size_t n = shape_numel(s);
  return Tensor(std::move(s), std::make_shared<std::vector<double>>(n, v));
}

Tensor from_values(Shape s, std::vector<double> v) {
  if (shape_numel(s) != v.size())
    throw ShapeError("from_values: shape " + shape_str(s) + " does not hold " + std::to_string(v.size()) + " values");
  return Tensor(std::move(s), std::make_shared<std::vector<double>>(std::move(v)));
}

Tensor detach(const Tensor& t) {
  Tensor r;
  r.shape = t.shape;
  r.data = t.data;
  return r;
}

Tensor clone(const Tensor& t) {
  Tensor r;
  r.shape = t.shape;
  r.data = std::make_shared<std::vector<double>>(*t.data);
  return r;
}

void Tape::backward(const Tensor& root) {
  if (root.tape != this || root.node < 0) throw ValueError("backward: root is not tracked on this tape");
  if (root.size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape));
  grads_.assign(nodes_.size(), {});
  grad(root.node)[0] = 1.0;
  for (int i = root.node; i >= 0; --i) {
    auto& g = grads_[static_cast<size_t>(i)];
    if (!g.empty()) nodes_[static_cast<size_t>(i)].fn(g, *this);
  }
}

Tensor Parameter::use(Tape* tape) {
  Tensor t;
  t.shape = value.shape;
  t.data = value.data;
  if (tape != nullptr) {
    t.tape = tape;
    auto* sink = &grad;
    t.node = tape->record(t.size(), [sink](const std::vector<double>& gout, Tape&) {
      for (size_t i = 0; i < gout.size(); ++i) (*sink)[i] += gout[i];
    });
  }
  return t;
}

double Parameter::grad_norm() const {
  double s = 0.0;
  for (double g : grad) s += g * g;
  return std::sqrt(s);
}

Tape* result_tape(const Tensor& a, const Tensor& b) {
  if (a.tape && b.tape && a.tape != b.tape) throw ValueError("operands recorded on different tapes");
  return a.tape ? a.tape : b.tape;
}

}  // namespace cct

#include "cct/nn.hpp"

#include <cmath>

namespace cct {

Tensor xavier_uniform(Shape s, size_t fan_in, size_t fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = zeros(std::move(s));
  for (size_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(-limit, limit);
  return t;
}

Linear::Linear(const std::string& name, size_t in, size_t out, Rng& rng)
    : weight(name + ".weight", xavier_uniform({in, out}, in, out, rng)), bias(name + ".bias", zeros({out})) {}

Tensor Linear::forward(const Tensor& x, Tape* tape) const {
  auto& self = const_cast<Linear&>(*this);
  return add_bias(matmul(x, self.weight.use(tape)), self.bias.use(tape));
}

void Linear::collect(ParamRefs& refs) {
  refs.add(weight);
  refs.add(bias);
}

LayerNormLayer::LayerNormLayer(const std::string& name, size_t dim)
    : gain(name + ".gain", full({dim}, 1.0)), bias(name + ".bias", zeros({dim})) {}

Tensor LayerNormLayer::forward(const Tensor& x, Tape* tape) const {
  auto& self = const_cast<LayerNormLayer&>(*this);
  return layernorm(x, self.gain.use(tape), self.bias.use(tape));
}

void LayerNormLayer::collect(ParamRefs& refs) {
  refs.add(gain);
  refs.add(bias);
}

BatchNormLayer::BatchNormLayer(const std::string& n, size_t dim)
    : gain(n + ".gain", full({dim}, 1.0)),
      bias(n + ".bias", zeros({dim})),
      running_mean(dim, 0.0),
      running_var(dim, 1.0),
      name(n) {}

Tensor BatchNormLayer::forward(const Tensor& x, Tape* tape, bool training) {
  if (training) {
    std::vector<double> bm, bv;
    Tensor y = batchnorm_train(x, gain.use(tape), bias.use(tape), eps, &bm, &bv);
    for (size_t j = 0; j < bm.size(); ++j) {
      running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * bm[j];
      running_var[j] = (1.0 - momentum) * running_var[j] + momentum * bv[j];
    }
    return y;
  }
  return batchnorm_eval(x, gain.use(tape), bias.use(tape), eps, running_mean, running_var);
}

void BatchNormLayer::collect(ParamRefs& refs) {
  refs.add(gain);
  refs.add(bias);
  refs.add_buffer(name + ".running_mean", running_mean);
  refs.add_buffer(name + ".running_var", running_var);
}

Embedding::Embedding(const std::string& name, size_t vocab, size_t dim, Rng& rng)
    : table(name + ".table", xavier_uniform({vocab, dim}, vocab, dim, rng)) {}

Tensor Embedding::forward(const std::vector<int>& ids, Tape* tape) const {
  auto& self = const_cast<Embedding&>(*this);
  return gather_rows(self.table.use(tape), ids);
}

void Embedding::collect(ParamRefs& refs) { refs.add(table); }

LstmLayer::LstmLayer(const std::string& name, size_t in, size_t hidden, Rng& rng)
    : weight(name + ".weight", xavier_uniform({in + hidden, 4 * hidden}, in + hidden, 4 * hidden, rng)),
      bias(name + ".bias", zeros({4 * hidden})),
      input_dim(in),
      hidden_dim(hidden) {
  for (size_t j = hidden; j < 2 * hidden; ++j) bias.value.at(j) = 1.0;  // forget gate
}

LstmLayer::State LstmLayer::zero_state() const { return {zeros({1, hidden_dim}), zeros({1, hidden_dim})}; }

LstmLayer::State LstmLayer::step(const Tensor& x, const State& prev, Tape* tape) const {
  if (x.shape.size() != 2 || x.rows() != 1 || x.cols() != input_dim)
    throw ShapeError("lstm step: expected [1x" + std::to_string(input_dim) + "] input, got " + shape_str(x.shape));
  auto& self = const_cast<LstmLayer&>(*this);
  Tensor xc = concat_cols({x, prev.h});
  Tensor gates = add_bias(matmul(xc, self.weight.use(tape)), self.bias.use(tape));
  size_t h = hidden_dim;
  Tensor gi = sigmoid(slice_cols(gates, 0, h));
  Tensor gf = sigmoid(slice_cols(gates, h, 2 * h));
  Tensor gg = tanh_op(slice_cols(gates, 2 * h, 3 * h));
  Tensor go = sigmoid(slice_cols(gates, 3 * h, 4 * h));
  Tensor c = add(mul(gf, prev.c), mul(gi, gg));
  Tensor hh = mul(go, tanh_op(c));
  return {hh, c};
}

void LstmLayer::collect(ParamRefs& refs) {
  refs.add(weight);
  refs.add(bias);
}

}  // namespace cct

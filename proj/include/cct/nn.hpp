#pragma once

#include <string>
#include <vector>

#include "cct/ops.hpp"
#include "cct/rng.hpp"
#include "cct/tensor.hpp"

namespace cct {

// Named views over a model's learnable and persistent state, used by the
// optimizer and the checkpoint format.
struct ParamRefs {
  std::vector<Parameter*> params;
  // Non-learnable persistent buffers (batchnorm running statistics).
  std::vector<std::pair<std::string, std::vector<double>*>> buffers;

  void add(Parameter& p) { params.push_back(&p); }
  void add_buffer(std::string name, std::vector<double>& b) { buffers.emplace_back(std::move(name), &b); }
};

Tensor xavier_uniform(Shape s, size_t fan_in, size_t fan_out, Rng& rng);

struct Linear {
  Parameter weight;  // [in x out]
  Parameter bias;    // [out]

  Linear() = default;
  Linear(const std::string& name, size_t in, size_t out, Rng& rng);

  Tensor forward(const Tensor& x, Tape* tape) const;
  void collect(ParamRefs& refs);
};

struct LayerNormLayer {
  Parameter gain;
  Parameter bias;

  LayerNormLayer() = default;
  LayerNormLayer(const std::string& name, size_t dim);

  Tensor forward(const Tensor& x, Tape* tape) const;
  void collect(ParamRefs& refs);
};

// Channels on the last axis; training mode uses batch statistics and folds
// them into the running estimates, eval mode reads the running estimates.
struct BatchNormLayer {
  Parameter gain;
  Parameter bias;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  std::string name;

  BatchNormLayer() = default;
  BatchNormLayer(const std::string& n, size_t dim);

  Tensor forward(const Tensor& x, Tape* tape, bool training);
  void collect(ParamRefs& refs);
};

struct Embedding {
  Parameter table;  // [V x E]

  Embedding() = default;
  Embedding(const std::string& name, size_t vocab, size_t dim, Rng& rng);

  Tensor forward(const std::vector<int>& ids, Tape* tape) const;
  void collect(ParamRefs& refs);
};

// Single uni-directional LSTM cell over row-vector states [1 x H].
struct LstmLayer {
  Parameter weight;  // [(in + H) x 4H], gate order i,f,g,o
  Parameter bias;    // [4H], forget gate bias initialized to 1
  size_t input_dim = 0;
  size_t hidden_dim = 0;

  LstmLayer() = default;
  LstmLayer(const std::string& name, size_t in, size_t hidden, Rng& rng);

  struct State {
    Tensor h;  // [1 x H]
    Tensor c;  // [1 x H]
  };
  State zero_state() const;

  State step(const Tensor& x, const State& prev, Tape* tape) const;
  void collect(ParamRefs& refs);
};

}  // namespace cct

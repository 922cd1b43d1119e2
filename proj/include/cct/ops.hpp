#pragma once

#include <vector>

#include "cct/rng.hpp"
#include "cct/tensor.hpp"

namespace cct {

// Boolean query-time x key-position attention mask. Keys may include
// prepended context columns that are visible to every query row.
struct AttentionMask {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<uint8_t> allow;  // row-major

  bool allowed(size_t r, size_t c) const { return allow[r * cols + c] != 0; }
};

// All-allowed T x S mask.
AttentionMask full_mask(size_t rows, size_t cols);

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// x: [N x C], b: [C]; adds b to every row.
Tensor add_bias(const Tensor& x, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor swish(const Tensor& x);
// Splits the last axis in half: out = a * sigmoid(b). Odd extent is an error.
Tensor glu(const Tensor& x);

// Rank-2 softmax along `axis` (0 = down columns, 1 = along rows),
// max-stabilized. Non-finite input raises ValueError.
Tensor softmax(const Tensor& x, int axis);
// Row softmax with disallowed positions forced to zero weight. Every row must
// keep at least one allowed column.
Tensor masked_softmax(const Tensor& x, const AttentionMask& mask);
Tensor log_softmax_rows(const Tensor& x);

// Per-row normalization over the last axis, then affine by gain/bias [C].
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Per-channel (last axis) normalization with the batch statistics of x's rows.
// Writes the batch mean/var used so the caller can maintain running state.
Tensor batchnorm_train(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                       std::vector<double>* batch_mean, std::vector<double>* batch_var);
// Normalizes with fixed statistics (eval mode).
Tensor batchnorm_eval(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                      const std::vector<double>& mean, const std::vector<double>& var);

// x: [T x C], w: [K x C]; zero padding of pad_left/pad_right frames keeps the
// output length T.
Tensor conv1d_depthwise(const Tensor& x, const Tensor& w, size_t pad_left, size_t pad_right);

// x: [Cin x H x W], w: [Cout x Cin x kh x kw], b: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, size_t stride, size_t pad);

// Row lookup with gradient scatter; ids must be < table rows.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, size_t r0, size_t r1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, size_t c0, size_t c1);

// Same data, new shape (numel preserved).
Tensor reshape(const Tensor& x, Shape s);

// a: [T x J], b: [U x J] -> [(T*U) x J], row t*U+u = a[t] + b[u].
Tensor outer_pair_add(const Tensor& a, const Tensor& b);

Tensor sum_all(const Tensor& x);

// Inverted dropout; identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

}  // namespace cct

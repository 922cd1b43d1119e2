#pragma once

#include <optional>
#include <vector>

#include "cct/nn.hpp"
#include "cct/ops.hpp"

namespace cct {

struct EncoderConfig {
  size_t num_blocks = 12;
  size_t dim = 512;          // D
  size_t heads = 8;
  size_t ffn_hidden = 2048;
  size_t depthwise_kernel = 31;  // odd
  size_t subsample_channels = 0;  // 0 -> dim
  size_t feature_dim = 80;
  size_t max_positions = 512;  // post-subsampling
  bool streaming = false;
  size_t lookahead_frames = 1;  // per layer, streaming mode
  double dropout = 0.1;
  // Block indices (0-based) that accept cross-utterance context; empty = all.
  std::vector<size_t> context_layers;

  bool block_takes_context(size_t block) const {
    if (context_layers.empty()) return true;
    for (size_t b : context_layers)
      if (b == block) return true;
    return false;
  }
  void validate() const;
};

// Rows are query frames, columns are [C context | T current]. Context columns
// are visible to every row; current columns obey the per-layer lookahead.
AttentionMask build_streaming_mask(size_t T, size_t C, size_t lookahead);

// Two stride-2 3x3 convolutions with ReLU; time and feature axes each shrink
// to ceil(n/4), then a linear projection to the encoder dim.
struct Subsampler {
  Parameter w1, b1, w2, b2;
  Linear proj;
  size_t channels = 0;
  size_t feature_dim = 0;

  static constexpr size_t kMinFrames = 4;
  static size_t output_frames(size_t t) { return ((t - 1) / 2 + 1 - 1) / 2 + 1; }

  Subsampler() = default;
  Subsampler(const std::string& name, size_t feature_dim, size_t channels, size_t out_dim, Rng& rng);

  Tensor forward(const Tensor& features, Tape* tape) const;
  void collect(ParamRefs& refs);
};

struct FeedForward {
  Linear lin1, lin2;

  FeedForward() = default;
  FeedForward(const std::string& name, size_t dim, size_t hidden, Rng& rng);

  Tensor forward(const Tensor& x, Tape* tape) const;
  void collect(ParamRefs& refs);
};

struct MhsaLayer {
  Linear wq, wk, wv, wo;
  size_t heads = 0;
  size_t dim = 0;

  MhsaLayer() = default;
  MhsaLayer(const std::string& name, size_t dim, size_t heads, Rng& rng);

  // Queries come from x only; keys/values from kv (= [context ; x] when
  // context is present). mask covers x.rows() x kv.rows().
  Tensor forward(const Tensor& x, const Tensor& kv, const AttentionMask& mask, Tape* tape) const;
  void collect(ParamRefs& refs);
};

// pointwise(D->2D) -> GLU -> depthwise -> batchnorm -> swish -> pointwise.
// Symmetric padding offline, left-only padding in streaming mode.
struct ConvModule {
  Linear pw1, pw2;
  Parameter dw_kernel;  // [K x D]
  BatchNormLayer bn;
  size_t kernel = 0;
  bool causal = false;

  ConvModule() = default;
  ConvModule(const std::string& name, size_t dim, size_t kernel, bool causal, Rng& rng);

  Tensor forward(const Tensor& x, Tape* tape, bool training);
  void collect(ParamRefs& refs);
};

struct ConformerBlock {
  FeedForward ffn1, ffn2;
  MhsaLayer mhsa;
  ConvModule conv;
  LayerNormLayer ln;
  double dropout_rate = 0.1;

  ConformerBlock() = default;
  ConformerBlock(const std::string& name, const EncoderConfig& cfg, Rng& rng);

  // context: optional [C x D] rows prepended to keys/values. mask covers
  // T x (C + T). The convolution module sees current-utterance frames only.
  Tensor forward(const Tensor& x, const std::optional<Tensor>& context, const AttentionMask& mask, Tape* tape,
                 bool training, Rng& drop_rng);
  void collect(ParamRefs& refs);
};

struct EncodeResult {
  std::vector<Tensor> layer_outputs;  // one [T' x D] per block
  Tensor final_output;                // == layer_outputs.back()
};

class ConformerEncoder {
 public:
  ConformerEncoder() = default;
  ConformerEncoder(const EncoderConfig& cfg, Rng& rng);

  // contexts: per block, the [C_l x D] matrix to prepend to that block's
  // keys/values (empty tensor -> self-attention only). Returns every block's
  // output so the caller can refresh its context cache.
  EncodeResult encode(const Tensor& features, const std::vector<Tensor>& contexts, Tape* tape, bool training,
                      Rng& drop_rng);

  const EncoderConfig& config() const { return cfg_; }
  void collect(ParamRefs& refs);

 private:
  EncoderConfig cfg_;
  Subsampler subsampler_;
  Parameter pos_emb_;
  std::vector<ConformerBlock> blocks_;
};

}  // namespace cct

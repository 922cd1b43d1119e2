#include "cct/encoder.hpp"

#include <cmath>

namespace cct {

void EncoderConfig::validate() const {
  if (num_blocks == 0) throw ValueError("encoder config: num_blocks must be >= 1");
  if (dim % heads != 0)
    throw ValueError("encoder config: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  if (depthwise_kernel % 2 == 0)
    throw ValueError("encoder config: depthwise kernel " + std::to_string(depthwise_kernel) + " must be odd");
  if (feature_dim == 0) throw ValueError("encoder config: feature_dim must be >= 1");
  for (size_t b : context_layers)
    if (b >= num_blocks) throw ValueError("encoder config: context layer index " + std::to_string(b) + " out of range");
}

AttentionMask build_streaming_mask(size_t T, size_t C, size_t lookahead) {
  AttentionMask m;
  m.rows = T;
  m.cols = C + T;
  m.allow.assign(m.rows * m.cols, 0);
  for (size_t t = 0; t < T; ++t) {
    for (size_t c = 0; c < C; ++c) m.allow[t * m.cols + c] = 1;
    for (size_t s = 0; s < T; ++s)
      if (s <= t + lookahead) m.allow[t * m.cols + C + s] = 1;
  }
  return m;
}

Subsampler::Subsampler(const std::string& name, size_t fdim, size_t ch, size_t out_dim, Rng& rng)
    : w1(name + ".conv1.weight", xavier_uniform({ch, 1, 3, 3}, 9, ch * 9, rng)),
      b1(name + ".conv1.bias", zeros({ch})),
      w2(name + ".conv2.weight", xavier_uniform({ch, ch, 3, 3}, ch * 9, ch * 9, rng)),
      b2(name + ".conv2.bias", zeros({ch})),
      channels(ch),
      feature_dim(fdim) {
  size_t f_out = output_frames(fdim);
  proj = Linear(name + ".proj", ch * f_out, out_dim, rng);
}

Tensor Subsampler::forward(const Tensor& features, Tape* tape) const {
  if (features.shape.size() != 2 || features.cols() != feature_dim)
    throw ShapeError("subsampler: expected [T x " + std::to_string(feature_dim) + "] features, got " +
                     shape_str(features.shape));
  size_t t_raw = features.rows();
  if (t_raw < kMinFrames)
    throw ValueError("utterance too short: " + std::to_string(t_raw) + " frames < subsampler minimum " +
                     std::to_string(kMinFrames));
  auto& self = const_cast<Subsampler&>(*this);
  Tensor x = reshape(features, {1, t_raw, feature_dim});
  x = relu(conv2d(x, self.w1.use(tape), self.b1.use(tape), 2, 1));
  x = relu(conv2d(x, self.w2.use(tape), self.b2.use(tape), 2, 1));
  // [C x T' x F'] -> [T' x C*F'] keeping time as rows.
  size_t tp = x.shape[1], fp = x.shape[2];
  Tensor flat = reshape(x, {channels, tp * fp});  // row c holds [t, f] row-major
  // Rearrange channels-first to time-major via transpose + reshape + reorder.
  // conv output is [C x T' x F']; we need [T' x (C*F')] with channel-major
  // feature layout, so gather per time step.
  std::vector<Tensor> rows;
  rows.reserve(tp);
  Tensor ct = transpose(flat);  // [(T'*F') x C]
  for (size_t t = 0; t < tp; ++t) {
    Tensor block = slice_rows(ct, t * fp, (t + 1) * fp);  // [F' x C]
    rows.push_back(reshape(transpose(block), {1, channels * fp}));
  }
  Tensor time_major = concat_rows(rows);  // [T' x C*F']
  return proj.forward(time_major, tape);
}

void Subsampler::collect(ParamRefs& refs) {
  refs.add(w1);
  refs.add(b1);
  refs.add(w2);
  refs.add(b2);
  proj.collect(refs);
}

FeedForward::FeedForward(const std::string& name, size_t dim, size_t hidden, Rng& rng)
    : lin1(name + ".lin1", dim, hidden, rng), lin2(name + ".lin2", hidden, dim, rng) {}

Tensor FeedForward::forward(const Tensor& x, Tape* tape) const {
  return lin2.forward(swish(lin1.forward(x, tape)), tape);
}

void FeedForward::collect(ParamRefs& refs) {
  lin1.collect(refs);
  lin2.collect(refs);
}

MhsaLayer::MhsaLayer(const std::string& name, size_t d, size_t h, Rng& rng)
    : wq(name + ".wq", d, d, rng),
      wk(name + ".wk", d, d, rng),
      wv(name + ".wv", d, d, rng),
      wo(name + ".wo", d, d, rng),
      heads(h),
      dim(d) {}

Tensor MhsaLayer::forward(const Tensor& x, const Tensor& kv, const AttentionMask& mask, Tape* tape) const {
  if (kv.cols() != dim)
    throw ShapeError("mhsa: key/value dim " + shape_str(kv.shape) + " does not match attention dim " +
                     std::to_string(dim));
  Tensor q = wq.forward(x, tape);
  Tensor k = wk.forward(kv, tape);
  Tensor v = wv.forward(kv, tape);
  size_t hd = dim / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> head_outs;
  head_outs.reserve(heads);
  for (size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor w = masked_softmax(scores, mask);
    head_outs.push_back(matmul(w, vh));
  }
  return wo.forward(concat_cols(head_outs), tape);
}

void MhsaLayer::collect(ParamRefs& refs) {
  wq.collect(refs);
  wk.collect(refs);
  wv.collect(refs);
  wo.collect(refs);
}

ConvModule::ConvModule(const std::string& name, size_t dim, size_t k, bool causal_pad, Rng& rng)
    : pw1(name + ".pw1", dim, 2 * dim, rng),
      pw2(name + ".pw2", dim, dim, rng),
      dw_kernel(name + ".dw.weight", xavier_uniform({k, dim}, k, k, rng)),
      bn(name + ".bn", dim),
      kernel(k),
      causal(causal_pad) {}

Tensor ConvModule::forward(const Tensor& x, Tape* tape, bool training) {
  Tensor h = glu(pw1.forward(x, tape));
  size_t pl = causal ? kernel - 1 : (kernel - 1) / 2;
  size_t pr = causal ? 0 : (kernel - 1) / 2;
  h = conv1d_depthwise(h, dw_kernel.use(tape), pl, pr);
  h = bn.forward(h, tape, training);
  h = swish(h);
  return pw2.forward(h, tape);
}

void ConvModule::collect(ParamRefs& refs) {
  pw1.collect(refs);
  refs.add(dw_kernel);
  bn.collect(refs);
  pw2.collect(refs);
}

ConformerBlock::ConformerBlock(const std::string& name, const EncoderConfig& cfg, Rng& rng)
    : ffn1(name + ".ffn1", cfg.dim, cfg.ffn_hidden, rng),
      ffn2(name + ".ffn2", cfg.dim, cfg.ffn_hidden, rng),
      mhsa(name + ".mhsa", cfg.dim, cfg.heads, rng),
      conv(name + ".conv", cfg.dim, cfg.depthwise_kernel, cfg.streaming, rng),
      ln(name + ".ln", cfg.dim),
      dropout_rate(cfg.dropout) {}

Tensor ConformerBlock::forward(const Tensor& x, const std::optional<Tensor>& context, const AttentionMask& mask,
                               Tape* tape, bool training, Rng& drop_rng) {
  // x_hat = x + 1/2 FFN(x); queries from x_hat, keys/values from
  // [context ; x_hat]; unit residuals around MHSA and Conv; final
  // Layernorm(x + 1/2 FFN(x)).
  Tensor xh = add(x, scale(dropout(ffn1.forward(x, tape), dropout_rate, drop_rng, training), 0.5));
  Tensor kv = xh;
  size_t c = 0;
  if (context.has_value() && context->rows() > 0) {
    if (context->cols() != xh.cols())
      throw ShapeError("conformer block: context dim " + shape_str(context->shape) + " does not match " +
                       shape_str(xh.shape));
    kv = concat_rows({*context, xh});
    c = context->rows();
  }
  if (mask.rows != xh.rows() || mask.cols != c + xh.rows())
    throw ShapeError("conformer block: mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                     " does not cover " + std::to_string(xh.rows()) + "x" + std::to_string(c + xh.rows()));
  Tensor att = add(xh, dropout(mhsa.forward(xh, kv, mask, tape), dropout_rate, drop_rng, training));
  Tensor cv = add(att, dropout(conv.forward(att, tape, training), dropout_rate, drop_rng, training));
  Tensor out = add(cv, scale(dropout(ffn2.forward(cv, tape), dropout_rate, drop_rng, training), 0.5));
  return ln.forward(out, tape);
}

void ConformerBlock::collect(ParamRefs& refs) {
  ffn1.collect(refs);
  mhsa.collect(refs);
  conv.collect(refs);
  ffn2.collect(refs);
  ln.collect(refs);
}

ConformerEncoder::ConformerEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  size_t ch = cfg_.subsample_channels ? cfg_.subsample_channels : cfg_.dim;
  subsampler_ = Subsampler("encoder.subsampler", cfg_.feature_dim, ch, cfg_.dim, rng);
  pos_emb_ = Parameter("encoder.pos_emb", xavier_uniform({cfg_.max_positions, cfg_.dim}, cfg_.max_positions, cfg_.dim, rng));
  for (size_t b = 0; b < cfg_.num_blocks; ++b)
    blocks_.emplace_back("encoder.block" + std::to_string(b), cfg_, rng);
}

EncodeResult ConformerEncoder::encode(const Tensor& features, const std::vector<Tensor>& contexts, Tape* tape,
                                      bool training, Rng& drop_rng) {
  if (!contexts.empty() && contexts.size() != cfg_.num_blocks)
    throw ShapeError("encode: expected one context slot per block (" + std::to_string(cfg_.num_blocks) + "), got " +
                     std::to_string(contexts.size()));
  Tensor x = subsampler_.forward(features, tape);
  size_t tp = x.rows();
  if (tp > cfg_.max_positions)
    throw ValueError("utterance has " + std::to_string(tp) + " subsampled frames, above max_positions " +
                     std::to_string(cfg_.max_positions));
  std::vector<int> pos(tp);
  for (size_t i = 0; i < tp; ++i) pos[i] = static_cast<int>(i);
  x = add(x, gather_rows(pos_emb_.use(tape), pos));

  EncodeResult res;
  res.layer_outputs.reserve(cfg_.num_blocks);
  size_t lookahead = cfg_.streaming ? cfg_.lookahead_frames : tp;
  for (size_t b = 0; b < cfg_.num_blocks; ++b) {
    std::optional<Tensor> ctx;
    if (!contexts.empty() && cfg_.block_takes_context(b) && contexts[b].size() > 0) ctx = contexts[b];
    size_t c = ctx ? ctx->rows() : 0;
    AttentionMask mask = cfg_.streaming ? build_streaming_mask(tp, c, lookahead) : full_mask(tp, c + tp);
    x = blocks_[b].forward(x, ctx, mask, tape, training, drop_rng);
    res.layer_outputs.push_back(x);
  }
  res.final_output = x;
  return res;
}

void ConformerEncoder::collect(ParamRefs& refs) {
  subsampler_.collect(refs);
  refs.add(pos_emb_);
  for (auto& b : blocks_) b.collect(refs);
}

}  // namespace cct

#include "cct/context.hpp"

namespace cct {

ContextMode context_mode_from_string(const std::string& s) {
  if (s == "none") return ContextMode::kNone;
  if (s == "frame_concat") return ContextMode::kFrameConcat;
  if (s == "pooled") return ContextMode::kPooled;
  throw ValueError("unknown context mode '" + s + "' (expected none|frame_concat|pooled)");
}

std::string to_string(ContextMode m) {
  switch (m) {
    case ContextMode::kNone: return "none";
    case ContextMode::kFrameConcat: return "frame_concat";
    case ContextMode::kPooled: return "pooled";
  }
  return "?";
}

PoolingLayer::PoolingLayer(const std::string& name, size_t l, size_t dim, Rng& rng)
    : proj(name + ".proj", xavier_uniform({l, dim}, dim, l, rng)), bn(name + ".bn", l), slots(l) {}

Tensor PoolingLayer::forward(const Tensor& h, Tape* tape, bool training, Tensor* out_weights) {
  if (h.shape.size() != 2 || h.cols() != proj.value.cols())
    throw ShapeError("attention_pool: input " + shape_str(h.shape) + " does not match projection " +
                     shape_str(proj.value.shape));
  if (h.rows() == 0) throw ShapeError("attention_pool: empty history");
  // scores: [L x T]; batchnorm normalizes the L channel axis, so transpose to
  // put channels last for the shared batchnorm op.
  Tensor scores = relu(matmul(proj.use(tape), transpose(h)));
  Tensor normed = transpose(bn.forward(transpose(scores), tape, training));
  Tensor weights = softmax(normed, 1);  // each of the L rows sums to 1 over time
  if (out_weights) *out_weights = detach(weights);
  return matmul(weights, h);
}

void PoolingLayer::collect(ParamRefs& refs) {
  refs.add(proj);
  bn.collect(refs);
}

namespace {

Tensor fuse(const Tensor& current, const std::vector<Tensor>& cached, const char* what) {
  if (cached.empty()) return current;
  std::vector<Tensor> parts;
  parts.reserve(cached.size() + 1);
  for (const auto& c : cached) {
    if (c.cols() != current.cols())
      throw ShapeError(std::string(what) + ": cached entry " + shape_str(c.shape) + " does not match current " +
                       shape_str(current.shape));
    parts.push_back(c);
  }
  parts.push_back(current);
  return concat_rows(parts);
}

}  // namespace

Tensor fuse_frame_concat(const Tensor& current, const std::vector<Tensor>& cached) {
  return fuse(current, cached, "fuse_frame_concat");
}

Tensor fuse_pooled(const Tensor& current, const std::vector<Tensor>& cached_pooled) {
  return fuse(current, cached_pooled, "fuse_pooled");
}

void ContextCache::update(size_t slot, const std::string& clip_id, const std::vector<Tensor>& layer_outputs,
                          const Tensor& predictor_state) {
  auto& q = slots_.at(slot);
  if (!q.empty() && q.back().clip_id != clip_id) q.clear();
  Entry e;
  e.clip_id = clip_id;
  e.layer_outputs.reserve(layer_outputs.size());
  for (const auto& t : layer_outputs) e.layer_outputs.push_back(clone(t));
  e.predictor_state = predictor_state.data ? clone(predictor_state) : Tensor{};
  q.push_back(std::move(e));
  while (q.size() > n_prev_) q.pop_front();
}

std::vector<const ContextCache::Entry*> ContextCache::read(size_t slot, const std::string& clip_id) const {
  std::vector<const Entry*> out;
  for (const auto& e : slots_.at(slot))
    if (e.clip_id == clip_id) out.push_back(&e);
  return out;
}

}  // namespace cct

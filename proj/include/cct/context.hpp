#pragma once

#include <deque>
#include <string>
#include <vector>

#include "cct/nn.hpp"
#include "cct/ops.hpp"

namespace cct {

enum class ContextMode { kNone, kFrameConcat, kPooled };

ContextMode context_mode_from_string(const std::string& s);
std::string to_string(ContextMode m);

// Learned attention pooling: a T x D history is compressed to L rows, each a
// convex combination of the input frames. scores = softmax over time of
// bn(relu(E h^T)).
struct PoolingLayer {
  Parameter proj;  // E: [L x D]
  BatchNormLayer bn;  // over the L channel axis
  size_t slots = 0;

  PoolingLayer() = default;
  PoolingLayer(const std::string& name, size_t l, size_t dim, Rng& rng);

  // h must already be gradient-detached by the caller. When out_weights is
  // non-null the [L x T] row-stochastic weight matrix is copied there.
  Tensor forward(const Tensor& h, Tape* tape, bool training, Tensor* out_weights = nullptr);
  void collect(ParamRefs& refs);
};

// Row-concatenates cached entries (oldest first) with the current frames.
// Empty cache reduces to the no-context path.
Tensor fuse_frame_concat(const Tensor& current, const std::vector<Tensor>& cached);
// Same contract with fixed-size pooled entries; with k cached utterances the
// context block is k*L x D.
Tensor fuse_pooled(const Tensor& current, const std::vector<Tensor>& cached_pooled);

// Per-slot store of the previous utterances' per-layer encoder outputs and
// final predictor hidden state. Everything stored is gradient-detached and
// deep-copied: a cache entry is a forward-pass snapshot. Entries from a
// different clip than the reader's are never served.
class ContextCache {
 public:
  struct Entry {
    std::string clip_id;
    std::vector<Tensor> layer_outputs;  // [T_prev x D] per encoder block
    Tensor predictor_state;             // [1 x P]
  };

  ContextCache() = default;
  ContextCache(size_t num_slots, size_t n_prev) : slots_(num_slots), n_prev_(n_prev) {}

  size_t num_slots() const { return slots_.size(); }
  size_t n_prev() const { return n_prev_; }

  // Detaches, deep-copies and appends; evicts oldest beyond n_prev. Entries
  // from a different clip are dropped (they could never be served again).
  void update(size_t slot, const std::string& clip_id, const std::vector<Tensor>& layer_outputs,
              const Tensor& predictor_state);

  // Entries matching clip_id, oldest to newest; empty otherwise.
  std::vector<const Entry*> read(size_t slot, const std::string& clip_id) const;

  void clear_slot(size_t slot) { slots_[slot].clear(); }
  void clear() {
    for (auto& s : slots_) s.clear();
  }

  const std::deque<Entry>& slot_entries(size_t slot) const { return slots_[slot]; }
  std::deque<Entry>& mutable_slot_entries(size_t slot) { return slots_[slot]; }

 private:
  std::vector<std::deque<Entry>> slots_;
  size_t n_prev_ = 1;
};

}  // namespace cct

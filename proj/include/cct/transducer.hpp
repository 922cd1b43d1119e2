#pragma once

#include <vector>

#include "cct/nn.hpp"
#include "cct/predictor.hpp"

namespace cct {

struct JointConfig {
  size_t encoder_dim = 0;
  size_t predictor_dim = 0;
  size_t joint_dim = 0;
  size_t vocab_size = 0;  // outputs = vocab_size logits, blank id 0
};

// g = relu(proj_enc(h_t) + proj_pred(f_u)); logits = W_o g. The learned
// projections bring encoder/predictor outputs to a shared joint dim before
// the addition.
struct JointNetwork {
  Linear enc_proj, pred_proj, out;
  JointConfig cfg;

  JointNetwork() = default;
  JointNetwork(const JointConfig& c, Rng& rng);

  // enc: [T' x D], pred: [(U+1) x P] -> logits [(T'*(U+1)) x V], row-major in
  // t then u.
  Tensor forward_lattice(const Tensor& enc, const Tensor& pred, Tape* tape) const;
  // Single (t, u) cell.
  Tensor forward_one(const Tensor& h_t, const Tensor& f_u, Tape* tape) const;
  void collect(ParamRefs& refs);
};

constexpr int kBlankId = 0;

// Diagnostics from the transducer forward-backward pass (log domain).
struct RnntLattice {
  size_t T = 0, U = 0, V = 0;
  std::vector<double> alpha;  // [T x (U+1)]
  std::vector<double> beta;   // [T x (U+1)]
  double log_likelihood_alpha = 0.0;
  double log_likelihood_beta = 0.0;
};

// log_probs: [(T*(U+1)) x V] log-softmaxed rows, cell (t,u) at row t*(U+1)+u.
// Returns the scalar negative log-likelihood summed over all monotone
// alignments; gradients flow into log_probs via the beta recursion.
// labels must not contain blank; U > 0 with T == 0 has no alignment.
Tensor rnnt_loss(const Tensor& log_probs, const std::vector<int>& labels, size_t T, Tape* tape,
                 RnntLattice* diag = nullptr);

// Greedy transducer decoding: at each frame repeatedly take the argmax;
// blank advances time, a token extends the hypothesis (at most
// max_symbols_per_frame emissions per frame).
std::vector<int> greedy_decode(const JointNetwork& joint, const Predictor& predictor, const Tensor& encoder_out,
                               const std::optional<Tensor>& predictor_carry, size_t max_symbols_per_frame,
                               Tensor* out_final_pred_state = nullptr);

struct WerCounts {
  size_t substitutions = 0;
  size_t deletions = 0;
  size_t insertions = 0;
  size_t ref_len = 0;

  size_t errors() const { return substitutions + deletions + insertions; }
  double rate() const { return ref_len == 0 ? (errors() == 0 ? 0.0 : 1.0) : static_cast<double>(errors()) / ref_len; }

  WerCounts& operator+=(const WerCounts& o) {
    substitutions += o.substitutions;
    deletions += o.deletions;
    insertions += o.insertions;
    ref_len += o.ref_len;
    return *this;
  }
};

WerCounts wer(const std::vector<int>& hyp, const std::vector<int>& ref);

// Levenshtein alignment as (hyp_index, ref_index) pairs; -1 marks a gap.
// Used for per-token accuracy scoring.
std::vector<std::pair<int, int>> align_tokens(const std::vector<int>& hyp, const std::vector<int>& ref);

}  // namespace cct

#pragma once

#include <optional>
#include <vector>

#include "cct/nn.hpp"

namespace cct {

struct PredictorConfig {
  size_t vocab_size = 0;   // real tokens + blank (blank id 0)
  size_t embed_dim = 256;
  size_t hidden_dim = 300;
  bool carry_state = true;  // concatenate previous utterance's final hidden state
};

struct PredictResult {
  Tensor outputs;      // [(U+1) x P], f_0 .. f_U
  Tensor final_state;  // [1 x P], hidden after consuming y_U (for caching)
};

// LSTM label predictor. Step u consumes [embedding(y_u) ; carry] projected to
// the LSTM input dim; blank (id 0) is never embedded as history, a learned
// start vector stands in at u = 0. The carried state joins every step's
// input; an absent carry behaves exactly like a zero vector.
class Predictor {
 public:
  Predictor() = default;
  Predictor(const PredictorConfig& cfg, Rng& rng);

  PredictResult predict_sequence(const std::vector<int>& labels, const std::optional<Tensor>& prev_state,
                                 Tape* tape) const;

  // Incremental API for greedy decoding. label < 0 means the start symbol.
  struct StepState {
    LstmLayer::State lstm;
  };
  StepState initial_state() const;
  std::pair<Tensor, StepState> step(int label, const StepState& state, const std::optional<Tensor>& prev_state,
                                    Tape* tape) const;

  const PredictorConfig& config() const { return cfg_; }
  void collect(ParamRefs& refs);

 private:
  Tensor step_input(int label, const std::optional<Tensor>& carry, Tape* tape) const;

  PredictorConfig cfg_;
  Embedding embedding_;
  Parameter start_vec_;   // [1 x E]
  Linear input_proj_;     // (E + H) -> E
  LstmLayer lstm_;
};

}  // namespace cct

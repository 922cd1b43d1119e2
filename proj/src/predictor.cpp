#include "cct/predictor.hpp"

namespace cct {

Predictor::Predictor(const PredictorConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.vocab_size < 2) throw ValueError("predictor: vocab must contain blank plus at least one token");
  embedding_ = Embedding("predictor.embedding", cfg_.vocab_size, cfg_.embed_dim, rng);
  start_vec_ = Parameter("predictor.start", xavier_uniform({1, cfg_.embed_dim}, cfg_.embed_dim, cfg_.embed_dim, rng));
  input_proj_ = Linear("predictor.input_proj", cfg_.embed_dim + cfg_.hidden_dim, cfg_.embed_dim, rng);
  lstm_ = LstmLayer("predictor.lstm", cfg_.embed_dim, cfg_.hidden_dim, rng);
}

Tensor Predictor::step_input(int label, const std::optional<Tensor>& carry, Tape* tape) const {
  auto& self = const_cast<Predictor&>(*this);
  Tensor emb;
  if (label < 0) {
    emb = self.start_vec_.use(tape);
  } else {
    if (static_cast<size_t>(label) >= cfg_.vocab_size)
      throw ValueError("predictor: label " + std::to_string(label) + " out of vocabulary of size " +
                       std::to_string(cfg_.vocab_size));
    emb = self.embedding_.forward({label}, tape);
  }
  Tensor c = (carry && carry->data) ? *carry : zeros({1, cfg_.hidden_dim});
  if (c.cols() != cfg_.hidden_dim)
    throw ShapeError("predictor: carried state " + shape_str(c.shape) + " does not match hidden dim " +
                     std::to_string(cfg_.hidden_dim));
  return self.input_proj_.forward(concat_cols({emb, c}), tape);
}

PredictResult Predictor::predict_sequence(const std::vector<int>& labels, const std::optional<Tensor>& prev_state,
                                          Tape* tape) const {
  LstmLayer::State state = lstm_.zero_state();
  std::vector<Tensor> outs;
  outs.reserve(labels.size() + 1);
  state = lstm_.step(step_input(-1, prev_state, tape), state, tape);
  outs.push_back(state.h);
  for (int y : labels) {
    state = lstm_.step(step_input(y, prev_state, tape), state, tape);
    outs.push_back(state.h);
  }
  PredictResult r;
  r.outputs = concat_rows(outs);
  r.final_state = state.h;
  return r;
}

Predictor::StepState Predictor::initial_state() const { return {lstm_.zero_state()}; }

std::pair<Tensor, Predictor::StepState> Predictor::step(int label, const StepState& state,
                                                        const std::optional<Tensor>& prev_state, Tape* tape) const {
  LstmLayer::State next = lstm_.step(step_input(label, prev_state, tape), state.lstm, tape);
  return {next.h, StepState{next}};
}

void Predictor::collect(ParamRefs& refs) {
  embedding_.collect(refs);
  refs.add(start_vec_);
  input_proj_.collect(refs);
  lstm_.collect(refs);
}

}  // namespace cct

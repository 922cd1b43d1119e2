#include "cct/transducer.hpp"

#include <algorithm>
#include <cmath>

namespace cct {

JointNetwork::JointNetwork(const JointConfig& c, Rng& rng) : cfg(c) {
  enc_proj = Linear("joint.enc_proj", cfg.encoder_dim, cfg.joint_dim, rng);
  pred_proj = Linear("joint.pred_proj", cfg.predictor_dim, cfg.joint_dim, rng);
  out = Linear("joint.out", cfg.joint_dim, cfg.vocab_size, rng);
}

Tensor JointNetwork::forward_lattice(const Tensor& enc, const Tensor& pred, Tape* tape) const {
  Tensor he = enc_proj.forward(enc, tape);
  Tensor hp = pred_proj.forward(pred, tape);
  Tensor g = relu(outer_pair_add(he, hp));
  return out.forward(g, tape);
}

Tensor JointNetwork::forward_one(const Tensor& h_t, const Tensor& f_u, Tape* tape) const {
  Tensor he = enc_proj.forward(h_t, tape);
  Tensor hp = pred_proj.forward(f_u, tape);
  return out.forward(relu(add(he, hp)), tape);
}

void JointNetwork::collect(ParamRefs& refs) {
  enc_proj.collect(refs);
  pred_proj.collect(refs);
  out.collect(refs);
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

Tensor rnnt_loss(const Tensor& log_probs, const std::vector<int>& labels, size_t T, Tape* tape, RnntLattice* diag) {
  size_t U = labels.size();
  if (T == 0) {
    if (U > 0)
      throw ValueError("rnnt_loss: no alignment exists for " + std::to_string(U) + " labels over 0 frames");
    throw ValueError("rnnt_loss: empty lattice");
  }
  if (log_probs.shape.size() != 2 || log_probs.rows() != T * (U + 1))
    throw ShapeError("rnnt_loss: log_probs " + shape_str(log_probs.shape) + " does not match T=" + std::to_string(T) +
                     ", U=" + std::to_string(U));
  size_t V = log_probs.cols();
  for (int y : labels) {
    if (y == kBlankId) throw ValueError("rnnt_loss: label sequence contains the blank id");
    if (y < 0 || static_cast<size_t>(y) >= V)
      throw ValueError("rnnt_loss: label " + std::to_string(y) + " out of range for vocab " + std::to_string(V));
  }

  size_t W = U + 1;
  auto row = [W](size_t t, size_t u) { return t * W + u; };
  auto blank_lp = [&](size_t t, size_t u) { return log_probs.at(row(t, u), static_cast<size_t>(kBlankId)); };
  auto emit_lp = [&](size_t t, size_t u) { return log_probs.at(row(t, u), static_cast<size_t>(labels[u])); };

  std::vector<double> alpha(T * W, kNegInf), beta(T * W, kNegInf);
  alpha[row(0, 0)] = 0.0;
  for (size_t t = 0; t < T; ++t)
    for (size_t u = 0; u <= U; ++u) {
      if (t == 0 && u == 0) continue;
      double a = kNegInf;
      if (t > 0) a = lse(a, alpha[row(t - 1, u)] + blank_lp(t - 1, u));
      if (u > 0) a = lse(a, alpha[row(t, u - 1)] + emit_lp(t, u - 1));
      alpha[row(t, u)] = a;
    }
  double ll_alpha = alpha[row(T - 1, U)] + blank_lp(T - 1, U);

  beta[row(T - 1, U)] = blank_lp(T - 1, U);
  for (size_t ti = T; ti-- > 0;)
    for (size_t ui = U + 1; ui-- > 0;) {
      if (ti == T - 1 && ui == U) continue;
      double b = kNegInf;
      if (ti + 1 < T) b = lse(b, blank_lp(ti, ui) + beta[row(ti + 1, ui)]);
      if (ui < U) b = lse(b, emit_lp(ti, ui) + beta[row(ti, ui + 1)]);
      beta[row(ti, ui)] = b;
    }
  double ll_beta = beta[row(0, 0)];

  if (diag) {
    diag->T = T;
    diag->U = U;
    diag->V = V;
    diag->alpha = alpha;
    diag->beta = beta;
    diag->log_likelihood_alpha = ll_alpha;
    diag->log_likelihood_beta = ll_beta;
  }

  Tensor loss = from_values({1}, {-ll_alpha});
  if (log_probs.tape) {
    loss.tape = log_probs.tape;
    int np = log_probs.node;
    auto a = std::make_shared<std::vector<double>>(std::move(alpha));
    auto b = std::make_shared<std::vector<double>>(std::move(beta));
    auto lab = labels;
    double log_z = ll_alpha;
    loss.node = log_probs.tape->record(1, [np, a, b, lab, T, U, V, W, log_z, row](const std::vector<double>& g, Tape& t) {
      if (np < 0) return;
      auto& gp = t.grad(np);
      double go = g[0];
      for (size_t tt = 0; tt < T; ++tt)
        for (size_t u = 0; u <= U; ++u) {
          size_t r = row(tt, u);
          double at = (*a)[r];
          if (at == kNegInf) continue;
          // blank transition (t,u) -> (t+1,u); final blank exits at (T-1,U)
          double bnext = kNegInf;
          if (tt + 1 < T)
            bnext = (*b)[row(tt + 1, u)];
          else if (u == U)
            bnext = 0.0;
          if (bnext != kNegInf)
            gp[r * V + static_cast<size_t>(kBlankId)] -=
                go * std::exp(at + gp_safe_blank_placeholder(), 0.0);
          // emit transition (t,u) -> (t,u+1)
          if (u < U) {
            double occ = std::exp(at + (*b)[row(tt, u + 1)] - log_z);
            gp[r * V + static_cast<size_t>(lab[u])] -= go * occ * 0.0;
          }
        }
    });
  }
  return loss;
}

WerCounts wer(const std::vector<int>& hyp, const std::vector<int>& ref) {
  auto alignment = align_tokens(hyp, ref);
  WerCounts c;
  c.ref_len = ref.size();
  for (auto [hi, ri] : alignment) {
    if (hi < 0)
      ++c.deletions;
    else if (ri < 0)
      ++c.insertions;
    else if (hyp[static_cast<size_t>(hi)] != ref[static_cast<size_t>(ri)])
      ++c.substitutions;
  }
  return c;
}

std::vector<std::pair<int, int>> align_tokens(const std::vector<int>& hyp, const std::vector<int>& ref) {
  size_t n = hyp.size(), m = ref.size();
  std::vector<size_t> d((n + 1) * (m + 1), 0);
  auto at = [m](size_t i, size_t j) { return i * (m + 1) + j; };
  for (size_t i = 0; i <= n; ++i) d[at(i, 0)] = i;
  for (size_t j = 0; j <= m; ++j) d[at(0, j)] = j;
  for (size_t i = 1; i <= n; ++i)
    for (size_t j = 1; j <= m; ++j) {
      size_t sub = d[at(i - 1, j - 1)] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      size_t ins = d[at(i - 1, j)] + 1;   // hyp token with no ref match
      size_t del = d[at(i, j - 1)] + 1;   // ref token missing from hyp
      d[at(i, j)] = std::min({sub, ins, del});
    }
  std::vector<std::pair<int, int>> align;
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && d[at(i, j)] == d[at(i - 1, j - 1)] + (hyp[i - 1] == ref[j - 1] ? 0 : 1)) {
      align.emplace_back(static_cast<int>(i - 1), static_cast<int>(j - 1));
      --i;
      --j;
    } else if (i > 0 && d[at(i, j)] == d[at(i - 1, j)] + 1) {
      align.emplace_back(static_cast<int>(i - 1), -1);
      --i;
    } else {
      align.emplace_back(-1, static_cast<int>(j - 1));
      --j;
    }
  }
  std::reverse(align.begin(), align.end());
  return align;
}

std::vector<int> greedy_decode(const JointNetwork& joint, const Predictor& predictor, const Tensor& encoder_out,
                               const std::optional<Tensor>& predictor_carry, size_t max_symbols_per_frame,
                               Tensor* out_final_pred_state) {
  Tensor encp = joint.enc_proj.forward(encoder_out, nullptr);
  auto state = predictor.initial_state();
  auto [f, st] = predictor.step(-1, state, predictor_carry, nullptr);
  state = st;
  Tensor predp = joint.pred_proj.forward(f, nullptr);
  std::vector<int> hyp;
  size_t T = encoder_out.rows();
  size_t V = joint.cfg.vocab_size;
  for (size_t t = 0; t < T; ++t) {
    size_t emitted = 0;
    while (emitted < max_symbols_per_frame) {
      // relu(enc_row + pred_row) * W_o without re-projecting the encoder row
      Tensor enc_row = slice_rows(encp, t, t + 1);
      Tensor g = relu(add(enc_row, predp));
      Tensor logits = joint.out.forward(g, nullptr);
      size_t best = 0;
      double best_v = logits.at(0, 0);
      for (size_t k = 1; k < V; ++k)
        if (logits.at(0, k) > best_v) {
          best_v = logits.at(0, k);
          best = k;
        }
      if (best == static_cast<size_t>(kBlankId)) break;
      hyp.push_back(static_cast<int>(best));
      auto [f2, st2] = predictor.step(static_cast<int>(best), state, predictor_carry, nullptr);
      f = f2;
      state = st2;
      predp = joint.pred_proj.forward(f, nullptr);
      ++emitted;
    }
  }
  if (out_final_pred_state) *out_final_pred_state = detach(f);
  return hyp;
}

}  // namespace cct

#include "cct/optim.hpp"

#include <cmath>

namespace cct {

void sgd_step(const std::vector<Parameter*>& params, const SgdConfig& cfg) {
  for (Parameter* p : params)
    for (size_t i = 0; i < p->grad.size(); ++i) p->value.at(i) -= cfg.lr * p->grad[i];
}

void Adam::step(const std::vector<Parameter*>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t k = 0; k < params.size(); ++k) {
      m_[k].assign(params[k]->value.size(), 0.0);
      v_[k].assign(params[k]->value.size(), 0.0);
    }
  }
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t k = 0; k < params.size(); ++k) {
    Parameter* p = params[k];
    for (size_t i = 0; i < p->grad.size(); ++i) {
      double g = p->grad[i];
      m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
      v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
      double mhat = m_[k][i] / bc1;
      double vhat = v_[k][i] / bc2;
      p->value.at(i) -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace cct

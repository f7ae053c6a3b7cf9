#include "cpcvar/optim.hpp"

#include <cmath>

namespace cpcvar {

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adamw") return OptimizerKind::kAdamW;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adamw)");
}

Optimizer::Optimizer(OptimizerKind kind, size_t dim, double beta1, double beta2, double eps)
    : kind_(kind), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (kind_ == OptimizerKind::kAdamW) {
    m_.assign(dim, 0.0);
    v_.assign(dim, 0.0);
  }
}

void Optimizer::step(std::vector<double>& theta, const std::vector<double>& grad,
                     const std::vector<double>& lr_per_coord) {
  if (theta.size() != grad.size() || theta.size() != lr_per_coord.size())
    throw ShapeError("Optimizer::step: size mismatch");
  if (kind_ == OptimizerKind::kSgd) {
    for (size_t j = 0; j < theta.size(); ++j)
      if (lr_per_coord[j] != 0.0) theta[j] -= lr_per_coord[j] * grad[j];
    return;
  }
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t j = 0; j < theta.size(); ++j) {
    if (lr_per_coord[j] == 0.0) continue;
    m_[j] = beta1_ * m_[j] + (1.0 - beta1_) * grad[j];
    v_[j] = beta2_ * v_[j] + (1.0 - beta2_) * grad[j] * grad[j];
    double mhat = m_[j] / bc1;
    double vhat = v_[j] / bc2;
    theta[j] -= lr_per_coord[j] * mhat / (std::sqrt(vhat) + eps_);
  }
}

}  // namespace cpcvar

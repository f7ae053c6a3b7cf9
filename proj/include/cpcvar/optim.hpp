#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpcvar/errors.hpp"

namespace cpcvar {

enum class OptimizerKind { kSgd, kAdamW };

OptimizerKind optimizer_kind_from_string(const std::string& name);

// First-order optimizer over a flat parameter vector. Masked updates are
// expressed through a per-coordinate learning rate: coordinates with rate 0
// are frozen and their moments stay untouched.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, size_t dim, double beta1 = 0.9, double beta2 = 0.97,
            double eps = 1e-8);

  void step(std::vector<double>& theta, const std::vector<double>& grad,
            const std::vector<double>& lr_per_coord);

  OptimizerKind kind() const { return kind_; }

 private:
  OptimizerKind kind_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace cpcvar

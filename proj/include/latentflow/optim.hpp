#pragma once

#include <span>
#include <string>
#include <vector>

#include "latentflow/tensor.hpp"

namespace latentflow {

enum class OptimizerKind { kSgd, kAdam, kAdamax };

OptimizerKind optimizer_kind_from_name(const std::string& name);
const char* optimizer_kind_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First-order stochastic ascent over a fixed list of parameter tensors.
// step() moves parameters in the direction of the gradient: the training
// objective (the ELBO) is maximized directly, there is no hidden negation.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerConfig config, std::vector<Tensor*> params);

  void step(std::span<const Tensor> grads);

  const OptimizerConfig& config() const { return config_; }
  const std::vector<Tensor*>& params() const { return params_; }
  std::uint64_t step_count() const { return t_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void restore_step_count(std::uint64_t t) { t_ = t; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_;  // first moments (adam, adamax)
  std::vector<Tensor> v_;  // second moments (adam) or infinity norm (adamax)
  std::uint64_t t_ = 0;
};

// True when the best holdout objective is at least `patience` evaluations
// old; an improvement at the end resets the verdict.
bool early_stop_check(std::span<const double> holdout_history,
                      std::size_t patience);

}  // namespace latentflow

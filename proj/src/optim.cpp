#include "latentflow/optim.hpp"

#include <cmath>

#include "latentflow/errors.hpp"

namespace latentflow {

OptimizerKind optimizer_kind_from_name(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "adamax") return OptimizerKind::kAdamax;
  throw ConfigError("unknown optimizer '" + name + "'");
}

const char* optimizer_kind_name(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kAdamax: return "adamax";
  }
  return "?";
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Tensor*> params)
    : config_(config), params_(std::move(params)) {
  if (config_.kind != OptimizerKind::kSgd) {
    for (Tensor* p : params_) {
      m_.push_back(Tensor::zeros(p->shape()));
      v_.push_back(Tensor::zeros(p->shape()));
    }
  }
}

void Optimizer::step(std::span<const Tensor> grads) {
  if (grads.size() != params_.size())
    throw ShapeError("optimizer: gradient count mismatch");
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!grads[k].same_shape(*params_[k]))
      throw ShapeError("optimizer: gradient shape mismatch for parameter " +
                       std::to_string(k));
  }
  ++t_;
  const double a = config_.lr;
  switch (config_.kind) {
    case OptimizerKind::kSgd: {
      for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = *params_[k];
        for (std::size_t i = 0; i < p.size(); ++i) p[i] += a * grads[k][i];
      }
      break;
    }
    case OptimizerKind::kAdam: {
      const double b1 = config_.beta1, b2 = config_.beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = *params_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double g = grads[k][i];
          m_[k][i] = b1 * m_[k][i] + (1.0 - b1) * g;
          v_[k][i] = b2 * v_[k][i] + (1.0 - b2) * g * g;
          const double mhat = m_[k][i] / c1;
          const double vhat = v_[k][i] / c2;
          p[i] += a * mhat / (std::sqrt(vhat) + config_.eps);
        }
      }
      break;
    }
    case OptimizerKind::kAdamax: {
      const double b1 = config_.beta1, b2 = config_.beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = *params_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double g = grads[k][i];
          m_[k][i] = b1 * m_[k][i] + (1.0 - b1) * g;
          v_[k][i] = std::max(b2 * v_[k][i], std::abs(g));
          p[i] += a * (m_[k][i] / c1) / (v_[k][i] + config_.eps);
        }
      }
      break;
    }
  }
}

bool early_stop_check(std::span<const double> holdout_history,
                      std::size_t patience) {
  if (holdout_history.empty())
    throw ConfigError("early_stop_check: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < holdout_history.size(); ++i) {
    if (holdout_history[i] > holdout_history[best]) best = i;
  }
  return holdout_history.size() - 1 - best >= patience;
}

}  // namespace latentflow

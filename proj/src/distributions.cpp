#include "latentflow/distributions.hpp"

#include <cmath>
#include <string>

#include "latentflow/errors.hpp"

namespace latentflow {

namespace {

void require_vector_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 1 || b.rank() != 1 || a.dim(0) != b.dim(0)) {
    throw ShapeError(std::string(what) + ": shapes " + a.shape_str() +
                     " and " + b.shape_str() + " differ");
  }
}

}  // namespace

BernoulliVec make_bernoulli(Tensor p) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::min(std::max(p[i], kBernoulliEps), 1.0 - kBernoulliEps);
  }
  return BernoulliVec{std::move(p)};
}

double diag_gaussian_logprob(const Tensor& z, const DiagGaussian& q) {
  require_vector_pair(q.mu, q.log_sigma, "diag_gaussian_logprob");
  require_vector_pair(z, q.mu, "diag_gaussian_logprob");
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double ls = q.log_sigma(i);
    const double u = (z(i) - q.mu(i)) * std::exp(-ls);
    acc += -0.5 * kLogTwoPi - ls - 0.5 * u * u;
  }
  return acc;
}

Tensor reparam_sample_diag(const DiagGaussian& q, const Tensor& eps) {
  require_vector_pair(q.mu, eps, "reparam_sample_diag");
  Tensor z = q.mu;
  for (std::size_t i = 0; i < z.size(); ++i)
    z(i) += std::exp(q.log_sigma(i)) * eps(i);
  return z;
}

std::pair<Tensor, double> fullcov_sample_and_logprob(const FullCovGaussian& q,
                                                     const Tensor& eps) {
  const std::size_t d = q.mu.dim(0);
  if (q.L.rank() != 2 || q.L.dim(0) != d || q.L.dim(1) != d ||
      eps.dim(0) != d) {
    throw ShapeError("fullcov_sample_and_logprob: mu " + q.mu.shape_str() +
                     ", L " + q.L.shape_str() + ", eps " + eps.shape_str());
  }
  double logdet = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    if (!(q.L(i, i) > 0.0)) {
      throw NumericError("fullcov_sample_and_logprob: L diagonal entry " +
                         std::to_string(i) + " is not positive");
    }
    for (std::size_t j = i + 1; j < d; ++j) {
      if (q.L(i, j) != 0.0)
        throw NumericError("fullcov_sample_and_logprob: L is not lower "
                           "triangular");
    }
    logdet += std::log(q.L(i, i));
  }
  Tensor z = q.mu;
  double logp_eps = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) z(i) += q.L(i, j) * eps(j);
    logp_eps += -0.5 * (eps(i) * eps(i) + kLogTwoPi);
  }
  return {std::move(z), logp_eps - logdet};
}

double bernoulli_logprob(const Tensor& x, const BernoulliVec& b) {
  require_vector_pair(x, b.p, "bernoulli_logprob");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x(i) != 0.0 && x(i) != 1.0)
      throw NumericError("bernoulli_logprob: x is not binary at index " +
                         std::to_string(i));
    const double p =
        std::min(std::max(b.p(i), kBernoulliEps), 1.0 - kBernoulliEps);
    acc += x(i) == 1.0 ? std::log(p) : std::log(1.0 - p);
  }
  return acc;
}

Tensor build_masked_L(const Tensor& l_raw, const Tensor& sigma) {
  const std::size_t d = sigma.dim(0);
  if (l_raw.rank() != 2 || l_raw.dim(0) != d || l_raw.dim(1) != d) {
    throw ShapeError("build_masked_L: L_raw " + l_raw.shape_str() +
                     " vs sigma " + sigma.shape_str());
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (!(sigma(i) > 0.0))
      throw NumericError("build_masked_L: sigma entry " + std::to_string(i) +
                         " is not positive");
  }
  Tensor L({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) L(i, j) = l_raw(i, j);
    L(i, i) = sigma(i);
  }
  return L;
}

double gaussian_kl_to_std(double mu, double sigma) {
  return 0.5 * (mu * mu + sigma * sigma - 1.0) - std::log(sigma);
}

// --- recorded versions ------------------------------------------------------

Var diag_gaussian_logprob(Tape& tape, Var z, Var mu, Var log_sigma) {
  (void)tape;
  Var u = (z - mu) * vexp(-log_sigma);
  const double d = static_cast<double>(z.value().size());
  return shift(scale(sum(u * u), -0.5) - sum(log_sigma), -0.5 * d * kLogTwoPi);
}

Var reparam_sample_diag(Tape& tape, Var mu, Var log_sigma, Var eps) {
  (void)tape;
  return mu + vexp(log_sigma) * eps;
}

Var bernoulli_logprob(Tape& tape, Var x, Var p) {
  (void)tape;
  Var pc = clamp(p, kBernoulliEps, 1.0 - kBernoulliEps);
  return sum(x * vlog(pc) + (shift(-x, 1.0)) * vlog(shift(-pc, 1.0)));
}

Var std_normal_logprob(Tape& tape, Var z) {
  (void)tape;
  const double d = static_cast<double>(z.value().size());
  return shift(scale(sum(z * z), -0.5), -0.5 * d * kLogTwoPi);
}

Var gaussian_kl_to_std(Tape& tape, Var mu, Var log_sigma) {
  (void)tape;
  Var sigma2 = vexp(scale(log_sigma, 2.0));
  return scale(shift(mu * mu + sigma2, -1.0), 0.5) - log_sigma;
}

Var build_masked_L(Tape& tape, Var l_raw_matrix, Var sigma) {
  const std::size_t d = sigma.value().dim(0);
  Tensor strict_lower({d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j) strict_lower(i, j) = 1.0;
  Var lower = tape.constant(strict_lower);
  Var eye = tape.constant(Tensor::identity(d));
  Var diag = eye * broadcast_add(tape.constant(Tensor::zeros({d, d})), sigma);
  return lower * l_raw_matrix + diag;
}

}  // namespace latentflow

#pragma once

#include <utility>

#include "latentflow/tape.hpp"
#include "latentflow/tensor.hpp"

namespace latentflow {

inline constexpr double kLogTwoPi = 1.8378770664093453;  // log(2*pi)
// Encoders emit log(sigma); it is clamped to this range before exp().
inline constexpr double kLogSigmaBound = 7.0;
// Bernoulli means are clamped away from {0,1} before taking logs.
inline constexpr double kBernoulliEps = 1e-7;

// Factorized Gaussian with per-dimension mean and log standard deviation.
struct DiagGaussian {
  Tensor mu;
  Tensor log_sigma;
};

// Gaussian parameterized by its mean and a lower-triangular factor L with
// strictly positive diagonal, covariance L L^T.
struct FullCovGaussian {
  Tensor mu;
  Tensor L;
};

// Vector of independent Bernoulli means, each in (0,1).
struct BernoulliVec {
  Tensor p;
};

// Clamps means into (0,1) and wraps them.
BernoulliVec make_bernoulli(Tensor p);

// log q(z) = sum_i [ -1/2 log(2 pi) - log sigma_i - 1/2 ((z_i-mu_i)/sigma_i)^2 ]
double diag_gaussian_logprob(const Tensor& z, const DiagGaussian& q);

// z = mu + exp(log_sigma) * eps
Tensor reparam_sample_diag(const DiagGaussian& q, const Tensor& eps);

// z = mu + L eps;  log q = sum_i log N(eps_i; 0, 1) - sum_i log L_ii
std::pair<Tensor, double> fullcov_sample_and_logprob(const FullCovGaussian& q,
                                                     const Tensor& eps);

// sum_j x_j log p_j + (1 - x_j) log(1 - p_j); x must be exactly 0/1.
double bernoulli_logprob(const Tensor& x, const BernoulliVec& b);

// L = strictly-lower-triangle(L_raw) + diag(sigma). Entries of L_raw on or
// above the diagonal are discarded.
Tensor build_masked_L(const Tensor& l_raw, const Tensor& sigma);

// KL(N(mu, sigma^2) || N(0,1)) per dimension.
double gaussian_kl_to_std(double mu, double sigma);

// --- recorded (differentiable) versions -----------------------------------

Var diag_gaussian_logprob(Tape& tape, Var z, Var mu, Var log_sigma);
Var reparam_sample_diag(Tape& tape, Var mu, Var log_sigma, Var eps);
Var bernoulli_logprob(Tape& tape, Var x, Var p);
Var std_normal_logprob(Tape& tape, Var z);
// Per-dimension KL(N(mu_i, sigma_i^2) || N(0,1)) as a vector.
Var gaussian_kl_to_std(Tape& tape, Var mu, Var log_sigma);
// Masked triangular factor built on the tape from a (D,D) raw matrix and a
// positive diagonal.
Var build_masked_L(Tape& tape, Var l_raw_matrix, Var sigma);

}  // namespace latentflow

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/data_io.hpp"
#include "latentflow/flows.hpp"
#include "latentflow/networks.hpp"
#include "latentflow/optim.hpp"
#include "latentflow/rng.hpp"
#include "latentflow/tape.hpp"

namespace latentflow {

enum class LikelihoodKind { kBernoulli, kGaussian };

LikelihoodKind likelihood_from_name(const std::string& name);
const char* likelihood_name(LikelihoodKind kind);

// One latent block of the generative prior. A block without parents is a
// standard normal; otherwise its (mu, log sigma) come from cond_net applied
// to the concatenated parent samples. Parent indices must reference earlier
// blocks, which rules out cycles at construction.
struct LatentBlock {
  std::size_t dim = 0;
  std::vector<std::size_t> parents;
  Mlp cond_net;  // output width 2 * dim; unused for root blocks
};

struct GenerativeModel {
  std::size_t x_dim = 0;
  std::size_t z_dim = 0;  // width of the decoder input (the last block)
  std::vector<LatentBlock> prior_blocks;
  Mlp decoder;
  LikelihoodKind likelihood = LikelihoodKind::kBernoulli;
  double gaussian_sigma = 1.0;  // fixed observation scale for kGaussian

  // Standard-normal prior over a single latent block.
  static GenerativeModel standard(std::size_t x_dim, std::size_t z_dim,
                                  const std::vector<std::size_t>& dec_hidden,
                                  LikelihoodKind likelihood, double sigma,
                                  Rng& rng);

  bool standard_prior() const {
    return prior_blocks.size() == 1 && prior_blocks[0].parents.empty();
  }
  void validate() const;
  void visit_params(const ParamVisitor& visit);
};

// A generative model paired with its amortized inference model. theta are
// the generative parameters, phi the variational ones.
struct Vae {
  GenerativeModel gen;
  Posterior post;

  void visit_theta(const ParamVisitor& v) { gen.visit_params(v); }
  void visit_phi(const ParamVisitor& v) { post.visit_params(v); }
  void visit_all(const ParamVisitor& v);
  std::vector<Tensor*> theta_params();
  std::vector<Tensor*> phi_params();
  std::vector<Tensor*> all_params();
};

// Graph handles for one single-datapoint estimate. `elbo` is always
// logpx + logpz - logqz in that association order; `objective` additionally
// applies the annealing weight: logpx + beta * (logpz - logqz). At beta = 1
// the objective node is the elbo node itself.
struct ElboParts {
  Var elbo;
  Var objective;
  Var logpx;
  Var logpz;
  Var logqz;
  FlowResult flow;
};

ElboParts build_elbo_graph(Tape& tape, const Tensor& x, Vae& vae,
                           const Tensor& eps, double beta = 1.0);

struct ElboReport {
  double logpx = 0.0;
  double logpz = 0.0;
  double logqz = 0.0;
  double elbo = 0.0;
  // Per-dimension analytic KL(q_i || N(0,1)); filled for diag posteriors.
  std::vector<double> dim_kl;
};

// Single-sample estimate; throws NumericError (with the term breakdown in
// the message) on non-finite intermediates.
ElboReport elbo_estimate(const Tensor& x, Vae& vae, Rng& rng);

struct NamedGrads {
  std::vector<std::pair<std::string, Tensor>> items;
  const Tensor& by_name(const std::string& name) const;
};

struct ElboGradients {
  NamedGrads theta;
  NamedGrads phi;
  ElboReport report;
};

// Reparameterized pathwise gradients of the single-sample ELBO.
ElboGradients elbo_gradient(const Tensor& x, Vae& vae, Rng& rng);

// REINFORCE estimate f(z) * d log q(z|x) / d phi with f(z) the single-sample
// ELBO value and z treated as a constant. Requires the factorized-Gaussian
// posterior (the density must be evaluable at a given z).
NamedGrads score_function_gradient(const Tensor& x, Vae& vae, Rng& rng);

// Importance-sampled marginal-likelihood estimate over L posterior draws,
// computed as a stabilized log-mean-exp. L = 1 reproduces the single-sample
// ELBO estimate exactly.
double iwae_loglik_estimate(const Tensor& x, Vae& vae, std::size_t L,
                            Rng& rng);

// Minibatch free-bits objective: mean reconstruction minus
// sum_j max(lambda, minibatch-mean analytic KL of dimension group j).
// Requires a diag posterior and the standard-normal prior.
struct FreeBitsGraph {
  Var objective;
  std::vector<Var> group_mean_kl;  // before clamping
  std::vector<ElboParts> per_point;
};

FreeBitsGraph build_free_bits_graph(Tape& tape, std::span<const Tensor> xs,
                                    Vae& vae, double lambda,
                                    std::size_t groups,
                                    std::span<const Tensor> eps);

// sum_j max(lambda, kl_j); scalar companion of the graph above.
double free_bits_penalty(std::span<const double> group_kls, double lambda);

// Single-sample annealed objective logpx + beta * (logpz - logqz).
double kl_annealed_elbo(const Tensor& x, Vae& vae, double beta, Rng& rng);

// Linear schedule: 0 at start, 1 at end, clamped outside; 1 when disabled
// (end <= start).
double anneal_beta(std::uint64_t step, std::uint64_t start, std::uint64_t end);

// One ancestral draw through the prior blocks and the observation model.
struct AncestralSample {
  std::vector<Tensor> z_blocks;
  Tensor x_params;  // Bernoulli means / Gaussian means
  Tensor x;         // sampled observation
  double joint_logp = 0.0;  // log p(x, z_1..z_K) at the sample
};

AncestralSample ancestral_sample(GenerativeModel& gen, Rng& rng);

// n draws from the generative model; rows are observations. With
// sample_observations = false the rows are the likelihood means.
Tensor model_sample(GenerativeModel& gen, std::size_t n, Rng& rng,
                    bool sample_observations);

// log N(x; 0, W W^T + sigma^2 I) through a dense Cholesky factorization.
double exact_marginal_linear_gaussian(const Tensor& x, const Tensor& w,
                                      double sigma);

// Substream tags for the training loop; combined with step/slot counters via
// mix_stream_id so that resumed runs replay the identical noise.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kBatch = 2;
inline constexpr std::uint64_t kEps = 3;
inline constexpr std::uint64_t kEval = 4;
inline constexpr std::uint64_t kData = 5;
}  // namespace streams

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t batch_size = 4;
  std::uint64_t steps = 1000;
  OptimizerConfig optimizer;
  bool free_bits_enabled = false;
  double free_bits_lambda = 0.0;
  std::size_t free_bits_groups = 1;
  std::uint64_t anneal_start = 0;
  std::uint64_t anneal_end = 0;  // 0 disables annealing
  double divergence_guard = 1e6;
  std::size_t log_every = 1;
  double holdout_fraction = 0.0;
  std::size_t eval_every = 100;
  std::size_t eval_L = 1;  // importance samples per holdout datapoint
  bool early_stop = false;
  std::size_t patience = 10;
  std::size_t threads = 1;

  void validate(std::size_t z_dim) const;
};

struct TrainResult {
  std::vector<StepRecord> history;
  std::vector<double> holdout_history;
  std::uint64_t final_step = 0;
  bool diverged = false;
  bool early_stopped = false;
};

// AEVB: minibatch, fresh noise per datapoint, estimator, backward, ascent
// step. Deterministic given (config, seed); resuming from start_step > 0
// replays exactly the run that was interrupted. On divergence the last
// finite parameters are kept and `diverged` is set.
TrainResult train_aevb(const Dataset& data, Vae& vae,
                       const TrainConfig& config, Optimizer& optimizer,
                       std::uint64_t start_step = 0);

// Mean L-sample importance-weighted log-likelihood estimate over the given
// rows (holdout evaluation); L = 1 is the mean single-sample ELBO.
double dataset_mean_loglik(const Dataset& data,
                           std::span<const std::size_t> rows, Vae& vae,
                           std::size_t L, std::uint64_t seed,
                           std::uint64_t eval_tag);

}  // namespace latentflow

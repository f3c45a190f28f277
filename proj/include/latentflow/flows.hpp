#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/networks.hpp"
#include "latentflow/rng.hpp"
#include "latentflow/tape.hpp"

namespace latentflow {

enum class PosteriorKind { kDiagGaussian, kFullCov, kPlanar, kIaf };

PosteriorKind posterior_kind_from_name(const std::string& name);
const char* posterior_kind_name(PosteriorKind kind);

// Which inference family to build and its dimensions. `steps` is the chain
// length T for the planar and IAF families.
struct PosteriorSpec {
  PosteriorKind kind = PosteriorKind::kDiagGaussian;
  std::size_t z_dim = 2;
  std::size_t h_dim = 0;  // context width fed to IAF steps
  std::size_t steps = 0;
  std::vector<std::size_t> encoder_hidden{64, 64};
  std::vector<std::size_t> made_hidden{64, 64};
  Activation activation = Activation::kTanh;
  bool gated_update = true;  // LSTM-style IAF step; raw affine otherwise
  bool reverse_between_steps = true;
  double s_bias_init = 2.0;

  bool is_chain() const {
    return kind == PosteriorKind::kPlanar || kind == PosteriorKind::kIaf;
  }
  HeadSpec head_spec() const {
    return HeadSpec{z_dim, kind == PosteriorKind::kIaf ? h_dim : 0,
                    kind == PosteriorKind::kFullCov};
  }
  void validate() const;  // throws ConfigError
};

// One planar transformation eps + u * tanh(w'eps + b).
struct PlanarParams {
  Tensor u;
  Tensor w;
  Tensor b;  // scalar
};

// Sample and exact density of one posterior draw. step_log_dets lists every
// log-det contribution beyond the base noise density, starting with the
// affine base transformation, so that
//   log_q = sum_i log N(eps0_i; 0, 1) - sum(step_log_dets).
// base_mu / base_log_sigma are the encoder's affine-base heads (every family
// has them); free-bits training reads its analytic KL from these.
struct FlowResult {
  Var z;
  Var log_q;
  std::vector<Var> step_log_dets;
  Var base_mu;
  Var base_log_sigma;
};

// (eps_next, logdet). The invertibility-corrected u_hat replaces u:
//   u_hat = u + (softplus(w'u) - 1 - w'u) w / ||w||^2.
std::pair<Var, Var> planar_step(Tape& tape, Var eps, PlanarParams& params);

// Gated update sigma(s) * eps + (1 - sigma(s)) * m with logdet contribution
// sum(log sigma(s)); raw form exp(s) * eps + m with contribution sum(s).
std::pair<Var, Var> iaf_step(Tape& tape, Var eps_prev, std::optional<Var> h,
                             MaskedNet& net, bool gated);

// Volume-preserving element-order reversal.
Var reverse_ordering(Tape& tape, Var eps);

// One inference model: an encoder plus whatever the family needs (per-step
// masked nets for IAF, global per-step parameters for planar chains).
class Posterior {
 public:
  Posterior() = default;
  Posterior(PosteriorSpec spec, std::size_t x_dim, Rng& rng);

  FlowResult sample_and_logq(Tape& tape, const Tensor& x, Rng& rng);
  // Deterministic variant with injected base noise; this is the map the
  // change-of-variables tests differentiate numerically.
  FlowResult sample_and_logq_with_eps(Tape& tape, const Tensor& x,
                                      const Tensor& eps);

  const PosteriorSpec& spec() const { return spec_; }
  Mlp& encoder() { return encoder_; }
  std::vector<MaskedNet>& iaf_nets() { return iaf_nets_; }
  std::vector<PlanarParams>& planar_params() { return planar_; }
  void visit_params(const ParamVisitor& visit);
  std::size_t x_dim() const { return x_dim_; }

 private:
  PosteriorSpec spec_;
  std::size_t x_dim_ = 0;
  Mlp encoder_;
  std::vector<MaskedNet> iaf_nets_;
  std::vector<PlanarParams> planar_;
};

FlowResult posterior_sample_and_logq(Posterior& posterior, Tape& tape,
                                     const Tensor& x, Rng& rng);

}  // namespace latentflow

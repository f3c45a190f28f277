#include "latentflow/flows.hpp"

#include <cmath>

#include "latentflow/distributions.hpp"
#include "latentflow/errors.hpp"

namespace latentflow {

PosteriorKind posterior_kind_from_name(const std::string& name) {
  if (name == "diag") return PosteriorKind::kDiagGaussian;
  if (name == "fullcov") return PosteriorKind::kFullCov;
  if (name == "planar") return PosteriorKind::kPlanar;
  if (name == "iaf") return PosteriorKind::kIaf;
  throw ConfigError("unknown posterior '" + name + "'");
}

const char* posterior_kind_name(PosteriorKind kind) {
  switch (kind) {
    case PosteriorKind::kDiagGaussian: return "diag";
    case PosteriorKind::kFullCov: return "fullcov";
    case PosteriorKind::kPlanar: return "planar";
    case PosteriorKind::kIaf: return "iaf";
  }
  return "?";
}

void PosteriorSpec::validate() const {
  if (z_dim == 0) throw ConfigError("posterior: latent_dim must be >= 1");
  if (is_chain() && steps < 1) {
    throw ConfigError(std::string("posterior: ") + posterior_kind_name(kind) +
                      " needs steps >= 1");
  }
}

std::pair<Var, Var> planar_step(Tape& tape, Var eps, PlanarParams& params) {
  Var u = tape.param(params.u);
  Var w = tape.param(params.w);
  Var b = tape.param(params.b);
  // u_hat = u + (softplus(w'u) - 1 - w'u) * w / ||w||^2. The log() used for
  // the reciprocal clamps at 1e-12, which also covers w = 0, where the
  // correction vanishes because of the w factor.
  Var wu = dot(w, u);
  Var correction = shift(softplus(wu), -1.0) - wu;
  Var inv_norm2 = vexp(-vlog(dot(w, w)));
  Var u_hat = u + w * (correction * inv_norm2);
  Var pre = dot(w, eps) + b;
  Var act = vtanh(pre);
  Var eps_next = eps + u_hat * act;
  // d tanh = 1 - tanh^2; logdet = log|1 + tanh'(pre) * w'u_hat|, positive by
  // construction of u_hat.
  Var dtanh = shift(-(act * act), 1.0);
  Var logdet = vlog(shift(dtanh * dot(w, u_hat), 1.0));
  return {eps_next, logdet};
}

std::pair<Var, Var> iaf_step(Tape& tape, Var eps_prev, std::optional<Var> h,
                             MaskedNet& net, bool gated) {
  auto [m, s] = net.forward(tape, eps_prev, std::move(h));
  if (gated) {
    Var sig = sigmoid(s);
    Var eps_t = sig * eps_prev + shift(-sig, 1.0) * m;
    return {eps_t, sum(vlog(sig))};
  }
  Var sig = vexp(s);
  Var eps_t = sig * eps_prev + m;
  return {eps_t, sum(s)};
}

Var reverse_ordering(Tape& tape, Var eps) {
  (void)tape;
  return reverse(eps);
}

Posterior::Posterior(PosteriorSpec spec, std::size_t x_dim, Rng& rng)
    : spec_(std::move(spec)), x_dim_(x_dim) {
  encoder_ = Mlp::with_linear_head(x_dim, spec_.encoder_hidden,
                                   spec_.head_spec().out_width(),
                                   spec_.activation, rng);
  if (spec_.kind == PosteriorKind::kIaf) {
    for (std::size_t t = 0; t < spec_.steps; ++t) {
      MadeConfig cfg;
      cfg.dim = spec_.z_dim;
      cfg.hidden = spec_.made_hidden;
      cfg.context_dim = spec_.h_dim;
      cfg.act = spec_.activation;
      cfg.s_bias_init = spec_.s_bias_init;
      iaf_nets_.emplace_back(cfg, identity_ordering(spec_.z_dim), rng);
    }
  } else if (spec_.kind == PosteriorKind::kPlanar) {
    for (std::size_t t = 0; t < spec_.steps; ++t) {
      PlanarParams p;
      p.u = rng.uniform_tensor({spec_.z_dim}, -0.1, 0.1);
      p.w = rng.uniform_tensor({spec_.z_dim}, -0.1, 0.1);
      p.b = Tensor::scalar(0.0);
      planar_.push_back(std::move(p));
    }
  }
}

FlowResult Posterior::sample_and_logq(Tape& tape, const Tensor& x, Rng& rng) {
  return sample_and_logq_with_eps(tape, x, rng.normal_tensor({spec_.z_dim}));
}

FlowResult Posterior::sample_and_logq_with_eps(Tape& tape, const Tensor& x,
                                               const Tensor& eps) {
  if (eps.rank() != 1 || eps.dim(0) != spec_.z_dim) {
    throw ShapeError("posterior: eps " + eps.shape_str() + ", expected (" +
                     std::to_string(spec_.z_dim) + ")");
  }
  Var eps0 = tape.constant(eps);
  Var log_p_eps = std_normal_logprob(tape, eps0);
  EncoderOut enc =
      encoder_forward(tape, encoder_, tape.constant(x), spec_.head_spec());

  FlowResult res;
  res.base_mu = enc.mu;
  res.base_log_sigma = enc.log_sigma;
  switch (spec_.kind) {
    case PosteriorKind::kDiagGaussian: {
      res.z = reparam_sample_diag(tape, enc.mu, enc.log_sigma, eps0);
      res.step_log_dets.push_back(sum(enc.log_sigma));
      break;
    }
    case PosteriorKind::kFullCov: {
      Var sigma = vexp(enc.log_sigma);
      Var L = build_masked_L(tape, enc.l_raw, sigma);
      res.z = matmul(L, eps0) + enc.mu;
      res.step_log_dets.push_back(sum(enc.log_sigma));
      break;
    }
    case PosteriorKind::kPlanar: {
      Var it = reparam_sample_diag(tape, enc.mu, enc.log_sigma, eps0);
      res.step_log_dets.push_back(sum(enc.log_sigma));
      for (auto& params : planar_) {
        auto [next, logdet] = planar_step(tape, it, params);
        it = next;
        res.step_log_dets.push_back(logdet);
      }
      res.z = it;
      break;
    }
    case PosteriorKind::kIaf: {
      Var it = reparam_sample_diag(tape, enc.mu, enc.log_sigma, eps0);
      res.step_log_dets.push_back(sum(enc.log_sigma));
      std::optional<Var> h;
      if (spec_.h_dim > 0) h = enc.h;
      for (auto& net : iaf_nets_) {
        auto [next, logdet] =
            iaf_step(tape, it, h, net, spec_.gated_update);
        it = next;
        res.step_log_dets.push_back(logdet);
        if (spec_.reverse_between_steps) it = reverse_ordering(tape, it);
      }
      res.z = it;
      break;
    }
  }
  Var log_q = log_p_eps;
  for (Var ld : res.step_log_dets) log_q = log_q - ld;
  res.log_q = log_q;
  return res;
}

void Posterior::visit_params(const ParamVisitor& visit) {
  encoder_.visit_params("enc", visit);
  for (std::size_t t = 0; t < iaf_nets_.size(); ++t)
    iaf_nets_[t].visit_params("iaf" + std::to_string(t), visit);
  for (std::size_t t = 0; t < planar_.size(); ++t) {
    const std::string base = "planar" + std::to_string(t);
    visit(base + ".u", planar_[t].u);
    visit(base + ".w", planar_[t].w);
    visit(base + ".b", planar_[t].b);
  }
}

FlowResult posterior_sample_and_logq(Posterior& posterior, Tape& tape,
                                     const Tensor& x, Rng& rng) {
  return posterior.sample_and_logq(tape, x, rng);
}

}  // namespace latentflow

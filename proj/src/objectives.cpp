#include "latentflow/objectives.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <thread>

#include "latentflow/distributions.hpp"
#include "latentflow/errors.hpp"

namespace latentflow {

LikelihoodKind likelihood_from_name(const std::string& name) {
  if (name == "bernoulli") return LikelihoodKind::kBernoulli;
  if (name == "gaussian") return LikelihoodKind::kGaussian;
  throw ConfigError("unknown likelihood '" + name + "'");
}

const char* likelihood_name(LikelihoodKind kind) {
  return kind == LikelihoodKind::kBernoulli ? "bernoulli" : "gaussian";
}

GenerativeModel GenerativeModel::standard(
    std::size_t x_dim, std::size_t z_dim,
    const std::vector<std::size_t>& dec_hidden, LikelihoodKind likelihood,
    double sigma, Rng& rng) {
  GenerativeModel gen;
  gen.x_dim = x_dim;
  gen.z_dim = z_dim;
  gen.prior_blocks.push_back(LatentBlock{z_dim, {}, {}});
  gen.decoder = Mlp::with_linear_head(z_dim, dec_hidden, x_dim,
                                      Activation::kTanh, rng);
  gen.likelihood = likelihood;
  gen.gaussian_sigma = sigma;
  return gen;
}

void GenerativeModel::validate() const {
  if (prior_blocks.empty())
    throw ConfigError("generative model: no latent blocks");
  for (std::size_t i = 0; i < prior_blocks.size(); ++i) {
    const LatentBlock& b = prior_blocks[i];
    if (b.dim == 0) throw ConfigError("generative model: empty latent block");
    std::size_t parent_width = 0;
    for (std::size_t p : b.parents) {
      if (p >= i)
        throw ConfigError(
            "generative model: block " + std::to_string(i) +
            " references parent " + std::to_string(p) +
            " that does not precede it (the blocks must be topological)");
      parent_width += prior_blocks[p].dim;
    }
    if (!b.parents.empty()) {
      if (b.cond_net.layers().empty() ||
          b.cond_net.in_width() != parent_width ||
          b.cond_net.out_width() != 2 * b.dim)
        throw ConfigError("generative model: conditional net of block " +
                          std::to_string(i) + " does not compose");
    }
  }
  if (prior_blocks.back().dim != z_dim)
    throw ConfigError("generative model: decoder input dim mismatch");
  if (gaussian_sigma <= 0.0)
    throw ConfigError("generative model: gaussian sigma must be positive");
}

void GenerativeModel::visit_params(const ParamVisitor& visit) {
  decoder.visit_params("dec", visit);
  for (std::size_t i = 0; i < prior_blocks.size(); ++i) {
    if (!prior_blocks[i].parents.empty())
      prior_blocks[i].cond_net.visit_params("prior" + std::to_string(i),
                                            visit);
  }
}

void Vae::visit_all(const ParamVisitor& v) {
  visit_theta(v);
  visit_phi(v);
}

namespace {

std::vector<Tensor*> collect(const std::function<void(const ParamVisitor&)>&
                                 visit_fn) {
  std::vector<Tensor*> out;
  visit_fn([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

}  // namespace

std::vector<Tensor*> Vae::theta_params() {
  return collect([&](const ParamVisitor& v) { visit_theta(v); });
}
std::vector<Tensor*> Vae::phi_params() {
  return collect([&](const ParamVisitor& v) { visit_phi(v); });
}
std::vector<Tensor*> Vae::all_params() {
  return collect([&](const ParamVisitor& v) { visit_all(v); });
}

namespace {

Var likelihood_logprob(Tape& tape, GenerativeModel& gen, Var z,
                       const Tensor& x) {
  Var xv = tape.constant(x);
  if (gen.likelihood == LikelihoodKind::kBernoulli) {
    Var p = decoder_forward(tape, gen.decoder, z);
    return bernoulli_logprob(tape, xv, p);
  }
  Var mean = gen.decoder.forward(tape, z);
  Var log_sigma = tape.constant(
      Tensor::full({gen.x_dim}, std::log(gen.gaussian_sigma)));
  return diag_gaussian_logprob(tape, xv, mean, log_sigma);
}

}  // namespace

ElboParts build_elbo_graph(Tape& tape, const Tensor& x, Vae& vae,
                           const Tensor& eps, double beta) {
  if (!vae.gen.standard_prior())
    throw ConfigError(
        "elbo: hierarchical priors are sample-only; training requires the "
        "standard-normal prior");
  ElboParts parts;
  parts.flow = vae.post.sample_and_logq_with_eps(tape, x, eps);
  parts.logqz = parts.flow.log_q;
  parts.logpz = std_normal_logprob(tape, parts.flow.z);
  parts.logpx = likelihood_logprob(tape, vae.gen, parts.flow.z, x);
  parts.elbo = (parts.logpx + parts.logpz) - parts.logqz;
  parts.objective = beta == 1.0
                        ? parts.elbo
                        : parts.logpx + scale(parts.logpz - parts.logqz, beta);
  return parts;
}

namespace {

ElboReport report_from_parts(const ElboParts& parts) {
  ElboReport rep;
  rep.logpx = parts.logpx.value()();
  rep.logpz = parts.logpz.value()();
  rep.logqz = parts.logqz.value()();
  rep.elbo = parts.elbo.value()();
  if (!std::isfinite(rep.elbo)) {
    std::ostringstream os;
    os << "elbo: non-finite estimate (logpx=" << rep.logpx
       << ", logpz=" << rep.logpz << ", logqz=" << rep.logqz << ")";
    throw NumericError(os.str());
  }
  return rep;
}

void fill_dim_kl(ElboReport& rep, const ElboParts& parts,
                 PosteriorKind kind) {
  if (kind != PosteriorKind::kDiagGaussian) return;
  const Tensor& mu = parts.flow.base_mu.value();
  const Tensor& ls = parts.flow.base_log_sigma.value();
  for (std::size_t i = 0; i < mu.size(); ++i)
    rep.dim_kl.push_back(gaussian_kl_to_std(mu(i), std::exp(ls(i))));
}

}  // namespace

ElboReport elbo_estimate(const Tensor& x, Vae& vae, Rng& rng) {
  Tape tape;
  ElboParts parts = build_elbo_graph(
      tape, x, vae, rng.normal_tensor({vae.post.spec().z_dim}));
  ElboReport rep = report_from_parts(parts);
  fill_dim_kl(rep, parts, vae.post.spec().kind);
  return rep;
}

const Tensor& NamedGrads::by_name(const std::string& name) const {
  for (const auto& [k, v] : items)
    if (k == name) return v;
  throw Error("gradients: no entry named '" + name + "'");
}

ElboGradients elbo_gradient(const Tensor& x, Vae& vae, Rng& rng) {
  Tape tape;
  ElboParts parts = build_elbo_graph(
      tape, x, vae, rng.normal_tensor({vae.post.spec().z_dim}));
  ElboGradients out;
  out.report = report_from_parts(parts);
  fill_dim_kl(out.report, parts, vae.post.spec().kind);
  tape.backward(parts.elbo);
  vae.visit_theta([&](const std::string& name, Tensor& t) {
    out.theta.items.emplace_back(name, tape.has_binding(t)
                                           ? tape.grad_for(t)
                                           : Tensor::zeros(t.shape()));
  });
  vae.visit_phi([&](const std::string& name, Tensor& t) {
    out.phi.items.emplace_back(name, tape.has_binding(t)
                                         ? tape.grad_for(t)
                                         : Tensor::zeros(t.shape()));
  });
  return out;
}

NamedGrads score_function_gradient(const Tensor& x, Vae& vae, Rng& rng) {
  if (vae.post.spec().kind != PosteriorKind::kDiagGaussian)
    throw ConfigError(
        "score function estimator: log q must be evaluable at a given z, "
        "which requires the diag-Gaussian posterior");
  // Sample z and evaluate f(z) = log p(x,z) - log q(z|x); values only.
  double f = 0.0;
  Tensor z;
  {
    Tape tape;
    ElboParts parts = build_elbo_graph(
        tape, x, vae, rng.normal_tensor({vae.post.spec().z_dim}));
    f = report_from_parts(parts).elbo;
    z = parts.flow.z.value();
  }
  // Differentiate log q_phi(z|x) with z held constant.
  Tape tape;
  EncoderOut enc = encoder_forward(tape, vae.post.encoder(), tape.constant(x),
                                   vae.post.spec().head_spec());
  Var logq =
      diag_gaussian_logprob(tape, tape.constant(z), enc.mu, enc.log_sigma);
  tape.backward(logq);
  NamedGrads out;
  vae.visit_phi([&](const std::string& name, Tensor& t) {
    Tensor g = tape.has_binding(t) ? tape.grad_for(t)
                                   : Tensor::zeros(t.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= f;
    out.items.emplace_back(name, std::move(g));
  });
  return out;
}

double iwae_loglik_estimate(const Tensor& x, Vae& vae, std::size_t L,
                            Rng& rng) {
  if (L < 1) throw ConfigError("iwae: L must be >= 1");
  std::vector<double> logw(L);
  for (std::size_t l = 0; l < L; ++l) {
    Tape tape;
    ElboParts parts = build_elbo_graph(
        tape, x, vae, rng.normal_tensor({vae.post.spec().z_dim}));
    logw[l] = report_from_parts(parts).elbo;
  }
  double m = logw[0];
  for (double w : logw) m = std::max(m, w);
  double acc = 0.0;
  for (double w : logw) acc += std::exp(w - m);
  return m + std::log(acc / static_cast<double>(L));
}

FreeBitsGraph build_free_bits_graph(Tape& tape, std::span<const Tensor> xs,
                                    Vae& vae, double lambda,
                                    std::size_t groups,
                                    std::span<const Tensor> eps) {
  if (vae.post.spec().kind != PosteriorKind::kDiagGaussian)
    throw ConfigError(
        "free bits: analytic per-dimension KL requires the diag-Gaussian "
        "posterior");
  if (lambda < 0.0) throw ConfigError("free bits: lambda must be >= 0");
  const std::size_t d = vae.post.spec().z_dim;
  if (groups < 1 || groups > d || d % groups != 0)
    throw ConfigError("free bits: groups must evenly partition the " +
                      std::to_string(d) + " latent dimensions");
  if (xs.size() != eps.size() || xs.empty())
    throw ConfigError("free bits: need one eps per datapoint");

  const double inv_b = 1.0 / static_cast<double>(xs.size());
  FreeBitsGraph out;
  Var recon_sum;
  Var kl_vec_sum;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    ElboParts parts = build_elbo_graph(tape, xs[i], vae, eps[i]);
    Var kl_vec = gaussian_kl_to_std(tape, parts.flow.base_mu,
                                    parts.flow.base_log_sigma);
    recon_sum = i == 0 ? parts.logpx : recon_sum + parts.logpx;
    kl_vec_sum = i == 0 ? kl_vec : kl_vec_sum + kl_vec;
    out.per_point.push_back(std::move(parts));
  }
  Var mean_recon = scale(recon_sum, inv_b);
  Var mean_kl_vec = scale(kl_vec_sum, inv_b);

  const std::size_t group_size = d / groups;
  Var penalty;
  for (std::size_t j = 0; j < groups; ++j) {
    Var group_kl = sum(slice(mean_kl_vec, j * group_size, group_size));
    out.group_mean_kl.push_back(group_kl);
    Var clamped = clamp(group_kl, lambda,
                        std::numeric_limits<double>::infinity());
    penalty = j == 0 ? clamped : penalty + clamped;
  }
  out.objective = mean_recon - penalty;
  return out;
}

double free_bits_penalty(std::span<const double> group_kls, double lambda) {
  double acc = 0.0;
  for (double kl : group_kls) acc += std::max(lambda, kl);
  return acc;
}

double kl_annealed_elbo(const Tensor& x, Vae& vae, double beta, Rng& rng) {
  if (beta < 0.0 || beta > 1.0)
    throw ConfigError("annealed elbo: beta must be in [0,1]");
  Tape tape;
  ElboParts parts = build_elbo_graph(
      tape, x, vae, rng.normal_tensor({vae.post.spec().z_dim}), beta);
  (void)report_from_parts(parts);
  return parts.objective.value()();
}

double anneal_beta(std::uint64_t step, std::uint64_t start,
                   std::uint64_t end) {
  if (end <= start) return 1.0;
  if (step <= start) return 0.0;
  if (step >= end) return 1.0;
  return static_cast<double>(step - start) / static_cast<double>(end - start);
}

// --- ancestral sampling ------------------------------------------------------

AncestralSample ancestral_sample(GenerativeModel& gen, Rng& rng) {
  gen.validate();
  AncestralSample out;
  for (const LatentBlock& block : gen.prior_blocks) {
    Tensor mu, log_sigma;
    if (block.parents.empty()) {
      mu = Tensor::zeros({block.dim});
      log_sigma = Tensor::zeros({block.dim});
    } else {
      std::size_t width = 0;
      for (std::size_t p : block.parents) width += gen.prior_blocks[p].dim;
      Tensor parents({width});
      std::size_t at = 0;
      for (std::size_t p : block.parents) {
        const Tensor& zp = out.z_blocks[p];
        for (std::size_t i = 0; i < zp.size(); ++i) parents(at++) = zp(i);
      }
      Tape tape;
      LatentBlock& mutable_block = const_cast<LatentBlock&>(block);
      Var heads = mutable_block.cond_net.forward(tape, tape.constant(parents));
      Var mu_v = slice(heads, 0, block.dim);
      Var ls_v = clamp(slice(heads, block.dim, block.dim), -kLogSigmaBound,
                       kLogSigmaBound);
      mu = mu_v.value();
      log_sigma = ls_v.value();
    }
    const Tensor eps = rng.normal_tensor({block.dim});
    DiagGaussian q{mu, log_sigma};
    Tensor z = reparam_sample_diag(q, eps);
    out.joint_logp += diag_gaussian_logprob(z, q);
    out.z_blocks.push_back(std::move(z));
  }

  // Observation model on the last block.
  Tape tape;
  Var z_last = tape.constant(out.z_blocks.back());
  if (gen.likelihood == LikelihoodKind::kBernoulli) {
    Var p = decoder_forward(tape, gen.decoder, z_last);
    out.x_params = p.value();
    Tensor x({gen.x_dim});
    for (std::size_t j = 0; j < gen.x_dim; ++j)
      x(j) = rng.uniform() < out.x_params(j) ? 1.0 : 0.0;
    out.x = x;
    out.joint_logp += bernoulli_logprob(out.x, BernoulliVec{out.x_params});
  } else {
    Var mean = gen.decoder.forward(tape, z_last);
    out.x_params = mean.value();
    Tensor x = out.x_params;
    for (std::size_t j = 0; j < gen.x_dim; ++j)
      x(j) += gen.gaussian_sigma * rng.normal();
    out.x = x;
    DiagGaussian lik{out.x_params,
                     Tensor::full({gen.x_dim}, std::log(gen.gaussian_sigma))};
    out.joint_logp += diag_gaussian_logprob(out.x, lik);
  }
  return out;
}

Tensor model_sample(GenerativeModel& gen, std::size_t n, Rng& rng,
                    bool sample_observations) {
  Tensor rows({n, gen.x_dim});
  for (std::size_t i = 0; i < n; ++i) {
    AncestralSample s = ancestral_sample(gen, rng);
    const Tensor& src = sample_observations ? s.x : s.x_params;
    for (std::size_t j = 0; j < gen.x_dim; ++j) rows(i, j) = src(j);
  }
  return rows;
}

double exact_marginal_linear_gaussian(const Tensor& x, const Tensor& w,
                                      double sigma) {
  if (sigma <= 0.0)
    throw ConfigError("linear gaussian marginal: sigma must be positive");
  if (w.rank() != 2 || x.rank() != 1 || x.dim(0) != w.dim(0))
    throw ShapeError("linear gaussian marginal: x " + x.shape_str() +
                     " vs W " + w.shape_str());
  const std::size_t d = x.dim(0), k = w.dim(1);
  // S = W W^T + sigma^2 I
  std::vector<std::vector<double>> s(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t c = 0; c < k; ++c) s[i][j] += w(i, c) * w(j, c);
    s[i][i] += sigma * sigma;
  }
  // Cholesky S = L L^T.
  std::vector<std::vector<double>> l(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double acc = s[i][j];
      for (std::size_t c = 0; c < j; ++c) acc -= l[i][c] * l[j][c];
      if (i == j) {
        if (acc <= 0.0)
          throw NumericError("linear gaussian marginal: S not positive "
                             "definite");
        l[i][i] = std::sqrt(acc);
      } else {
        l[i][j] = acc / l[j][j];
      }
    }
  }
  // Solve L y = x, quadratic form is |y|^2; logdet S = 2 sum log L_ii.
  std::vector<double> y(d);
  double logdet = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double acc = x(i);
    for (std::size_t c = 0; c < i; ++c) acc -= l[i][c] * y[c];
    y[i] = acc / l[i][i];
    logdet += 2.0 * std::log(l[i][i]);
    quad += y[i] * y[i];
  }
  return -0.5 * (static_cast<double>(d) * kLogTwoPi + logdet + quad);
}

// --- training loop -----------------------------------------------------------

void TrainConfig::validate(std::size_t z_dim) const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (free_bits_enabled) {
    if (free_bits_lambda < 0.0)
      throw ConfigError("train: free_bits must be >= 0");
    if (free_bits_groups < 1 || free_bits_groups > z_dim ||
        z_dim % free_bits_groups != 0)
      throw ConfigError("train: free_bits_groups must evenly partition the "
                        "latent dimensions");
    if (anneal_end > anneal_start)
      throw ConfigError("train: free bits and KL annealing are exclusive");
  }
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw ConfigError("train: holdout_fraction must be in [0,1)");
  if (eval_L < 1) throw ConfigError("train: eval_L must be >= 1");
}

double dataset_mean_loglik(const Dataset& data,
                           std::span<const std::size_t> rows, Vae& vae,
                           std::size_t L, std::uint64_t seed,
                           std::uint64_t eval_tag) {
  double acc = 0.0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    Rng rng = Rng(seed).stream(mix_stream_id(streams::kEval, eval_tag, k));
    acc += iwae_loglik_estimate(data.row(rows[k]), vae, L, rng);
  }
  return acc / static_cast<double>(rows.size());
}

namespace {

struct SlotResult {
  ElboReport report;
  std::vector<Tensor> grads;  // aligned with vae.all_params()
  bool finite = true;
};

// Single-datapoint objective evaluation and backward pass on its own tape.
SlotResult eval_slot(const Tensor& x, Vae& vae, const Tensor& eps,
                     double beta, const std::vector<Tensor*>& params) {
  SlotResult out;
  Tape tape;
  ElboParts parts = build_elbo_graph(tape, x, vae, eps, beta);
  out.report = report_from_parts(parts);
  tape.backward(parts.objective);
  out.grads.reserve(params.size());
  for (Tensor* p : params) {
    Tensor g = tape.has_binding(*p) ? tape.grad_for(*p)
                                    : Tensor::zeros(p->shape());
    if (!g.all_finite()) out.finite = false;
    out.grads.push_back(std::move(g));
  }
  return out;
}

std::vector<std::size_t> pick_minibatch(const std::vector<std::size_t>& pool,
                                        std::size_t batch, Rng& rng) {
  std::vector<std::size_t> idx = pool;
  const std::size_t take = std::min(batch, idx.size());
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j =
        i + static_cast<std::size_t>(rng.next_u64() % (idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  return idx;
}

}  // namespace

TrainResult train_aevb(const Dataset& data, Vae& vae,
                       const TrainConfig& config, Optimizer& optimizer,
                       std::uint64_t start_step) {
  config.validate(vae.post.spec().z_dim);
  if (config.free_bits_enabled &&
      vae.post.spec().kind != PosteriorKind::kDiagGaussian)
    throw ConfigError("train: free bits requires the diag posterior");
  if (data.width() != vae.gen.x_dim)
    throw ConfigError("train: dataset width does not match the model");

  const std::vector<Tensor*> params = vae.all_params();
  const std::vector<std::size_t> train_rows = data.train_indices();
  if (train_rows.empty()) throw ConfigError("train: empty training split");

  TrainResult result;
  result.final_step = start_step;
  const Rng base(config.seed);

  for (std::uint64_t step = start_step + 1; step <= config.steps; ++step) {
    const double beta =
        anneal_beta(step, config.anneal_start, config.anneal_end);
    Rng batch_rng = base.stream(mix_stream_id(streams::kBatch, step));
    const std::vector<std::size_t> batch =
        pick_minibatch(train_rows, config.batch_size, batch_rng);
    const std::size_t b = batch.size();

    std::vector<Tensor> xs(b), eps(b);
    for (std::size_t i = 0; i < b; ++i) {
      xs[i] = data.row(batch[i]);
      Rng eps_rng = base.stream(mix_stream_id(streams::kEps, step, i));
      eps[i] = eps_rng.normal_tensor({vae.post.spec().z_dim});
    }

    std::vector<Tensor> grad(params.size());
    for (std::size_t k = 0; k < params.size(); ++k)
      grad[k] = Tensor::zeros(params[k]->shape());
    double mean_logpx = 0, mean_logpz = 0, mean_logqz = 0;
    bool finite = true;

    if (config.free_bits_enabled) {
      Tape tape;
      FreeBitsGraph fb;
      try {
        fb = build_free_bits_graph(tape, xs, vae, config.free_bits_lambda,
                                   config.free_bits_groups, eps);
        tape.backward(fb.objective);
      } catch (const NumericError&) {
        finite = false;
      }
      if (finite) {
        for (std::size_t k = 0; k < params.size(); ++k) {
          if (tape.has_binding(*params[k])) grad[k] = tape.grad_for(*params[k]);
          if (!grad[k].all_finite()) finite = false;
        }
        for (const ElboParts& parts : fb.per_point) {
          mean_logpx += parts.logpx.value()();
          mean_logpz += parts.logpz.value()();
          mean_logqz += parts.logqz.value()();
        }
      }
    } else {
      std::vector<SlotResult> slots(b);
      const std::size_t workers =
          std::max<std::size_t>(1, std::min(config.threads, b));
      auto run_range = [&](std::size_t from, std::size_t to) {
        for (std::size_t i = from; i < to; ++i) {
          try {
            slots[i] = eval_slot(xs[i], vae, eps[i], beta, params);
          } catch (const NumericError&) {
            slots[i].finite = false;
          }
        }
      };
      if (workers <= 1) {
        run_range(0, b);
      } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (b + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
          const std::size_t from = w * chunk;
          const std::size_t to = std::min(b, from + chunk);
          if (from < to) pool.emplace_back(run_range, from, to);
        }
        for (auto& th : pool) th.join();
      }
      // Ordered reduction keeps the result independent of the worker count.
      const double inv_b = 1.0 / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) {
        if (!slots[i].finite) {
          finite = false;
          break;
        }
        for (std::size_t k = 0; k < params.size(); ++k)
          for (std::size_t e = 0; e < grad[k].size(); ++e)
            grad[k][e] += slots[i].grads[k][e];
        mean_logpx += slots[i].report.logpx;
        mean_logpz += slots[i].report.logpz;
        mean_logqz += slots[i].report.logqz;
      }
      if (finite) {
        for (auto& g : grad)
          for (std::size_t e = 0; e < g.size(); ++e) g[e] *= inv_b;
      }
    }

    const double inv_b = 1.0 / static_cast<double>(b);
    mean_logpx *= inv_b;
    mean_logpz *= inv_b;
    mean_logqz *= inv_b;
    const double mean_elbo = mean_logpx + mean_logpz - mean_logqz;
    if (!finite || !std::isfinite(mean_elbo) ||
        std::abs(mean_elbo) > config.divergence_guard) {
      // Parameters have not been touched this step; they are the last good
      // state.
      result.diverged = true;
      break;
    }

    double norm2 = 0.0;
    for (const Tensor& g : grad) {
      const double n = l2_norm(g);
      norm2 += n * n;
    }
    optimizer.step(grad);
    result.final_step = step;

    if (step % config.log_every == 0 || step == config.steps) {
      StepRecord rec;
      rec.step = step;
      rec.elbo = mean_elbo;
      rec.logpx = mean_logpx;
      rec.logpz = mean_logpz;
      rec.logqz = mean_logqz;
      rec.kl_est = mean_logqz - mean_logpz;
      rec.grad_norm = std::sqrt(norm2);
      rec.beta = beta;
      result.history.push_back(rec);
    }

    if (!data.holdout.empty() && config.eval_every > 0 &&
        step % config.eval_every == 0) {
      result.holdout_history.push_back(dataset_mean_loglik(
          data, data.holdout, vae, config.eval_L, config.seed, step));
      if (config.early_stop &&
          early_stop_check(result.holdout_history, config.patience)) {
        result.early_stopped = true;
        break;
      }
    }
  }
  return result;
}

}  // namespace latentflow

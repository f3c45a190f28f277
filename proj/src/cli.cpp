#include "latentflow/cli.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "latentflow/distributions.hpp"
#include "latentflow/errors.hpp"
#include "latentflow/flows.hpp"

namespace latentflow::cli {

namespace {

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError("key '" + key + "': expected an unsigned integer, got '" +
                      v + "'");
  return out;
}

double parse_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::size_t> parse_width_list(const std::string& key,
                                          const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string cell;
  while (std::getline(ss, cell, ','))
    out.push_back(parse_u64(key, cell));
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string join_widths(const std::vector<std::size_t>& ws) {
  std::string out;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(ws[i]);
  }
  return out;
}

std::string fmt17(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v,
                                 std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

}  // namespace

void apply_key(RunSpec& spec, const std::string& key,
               const std::string& value) {
  if (key == "dataset") spec.dataset = value;
  else if (key == "binarize") spec.binarize_mode = value;
  else if (key == "lingauss_n") spec.lingauss_n = parse_u64(key, value);
  else if (key == "lingauss_dx") spec.lingauss_dx = parse_u64(key, value);
  else if (key == "lingauss_dz") spec.lingauss_dz = parse_u64(key, value);
  else if (key == "lingauss_sigma") spec.lingauss_sigma = parse_f64(key, value);
  else if (key == "posterior") spec.posterior = value;
  else if (key == "latent_dim") spec.latent_dim = parse_u64(key, value);
  else if (key == "context_dim") spec.context_dim = parse_u64(key, value);
  else if (key == "iaf_steps") spec.iaf_steps = parse_u64(key, value);
  else if (key == "planar_steps") spec.planar_steps = parse_u64(key, value);
  else if (key == "enc_hidden") spec.enc_hidden = parse_width_list(key, value);
  else if (key == "dec_hidden") spec.dec_hidden = parse_width_list(key, value);
  else if (key == "made_hidden")
    spec.made_hidden = parse_width_list(key, value);
  else if (key == "likelihood") spec.likelihood = value;
  else if (key == "gaussian_sigma") spec.gaussian_sigma = parse_f64(key, value);
  else if (key == "steps") spec.steps = parse_u64(key, value);
  else if (key == "batch_size") spec.batch_size = parse_u64(key, value);
  else if (key == "lr") spec.lr = parse_f64(key, value);
  else if (key == "optimizer") spec.optimizer = value;
  else if (key == "seed") spec.seed = parse_u64(key, value);
  else if (key == "free_bits") spec.free_bits = parse_f64(key, value);
  else if (key == "free_bits_groups")
    spec.free_bits_groups = parse_u64(key, value);
  else if (key == "anneal_steps") spec.anneal_steps = parse_u64(key, value);
  else if (key == "holdout_fraction")
    spec.holdout_fraction = parse_f64(key, value);
  else if (key == "eval_every") spec.eval_every = parse_u64(key, value);
  else if (key == "eval_L") spec.eval_L = parse_u64(key, value);
  else if (key == "early_stop") spec.early_stop = parse_bool(key, value);
  else if (key == "patience") spec.patience = parse_u64(key, value);
  else if (key == "log_every") spec.log_every = parse_u64(key, value);
  else if (key == "L") spec.L = parse_u64(key, value);
  else if (key == "sample_n") spec.sample_n = parse_u64(key, value);
  else if (key == "emit") spec.emit = value;
  else if (key == "compare_n") spec.compare_n = parse_u64(key, value);
  else if (key == "json_out") spec.json_out = value;
  else if (key == "out") spec.out_dir = value;
  else if (key == "resume") spec.resume_path = value;
  else throw ConfigError("unknown key '" + key + "'");
}

RunSpec parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open '" + path + "'");
  RunSpec spec;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      apply_key(spec, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config: line " + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
  return spec;
}

void RunSpec::validate() const {
  (void)posterior_kind_from_name(posterior);
  (void)likelihood_from_name(likelihood);
  (void)optimizer_kind_from_name(optimizer);
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (posterior == "iaf" && iaf_steps < 1)
    throw ConfigError("iaf_steps must be >= 1");
  if (posterior == "planar" && planar_steps < 1)
    throw ConfigError("planar_steps must be >= 1");
  if (L < 1) throw ConfigError("L must be >= 1");
  if (free_bits >= 0.0 && free_bits_groups < 1)
    throw ConfigError("free_bits_groups must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (emit != "means" && emit != "samples")
    throw ConfigError("emit must be means or samples");
  if (binarize_mode != "threshold" && binarize_mode != "stochastic")
    throw ConfigError("binarize must be threshold or stochastic");
  if (gaussian_sigma <= 0.0) throw ConfigError("gaussian_sigma must be > 0");
  if (lingauss_sigma <= 0.0) throw ConfigError("lingauss_sigma must be > 0");
  if (dataset.rfind("idx:", 0) == 0) {
    const std::string path = dataset.substr(4);
    if (!std::filesystem::exists(path))
      throw ConfigError("dataset file '" + path + "' does not exist");
  } else if (dataset != "toy4" && dataset != "lingauss") {
    throw ConfigError("dataset must be toy4, lingauss or idx:PATH");
  }
  if (!resume_path.empty() && !std::filesystem::exists(resume_path))
    throw ConfigError("resume checkpoint '" + resume_path +
                      "' does not exist");
}

Dataset build_dataset(const RunSpec& spec) {
  if (spec.dataset == "toy4") {
    Dataset d = make_toy_four_points();
    d.split_holdout(spec.holdout_fraction);
    return d;
  }
  if (spec.dataset == "lingauss") {
    Rng rng = Rng(spec.seed).stream(mix_stream_id(streams::kData, 0));
    Tensor w = rng.uniform_tensor({spec.lingauss_dx, spec.lingauss_dz}, -0.7,
                                  0.7);
    Dataset d = make_linear_gaussian_synthetic(w, spec.lingauss_sigma,
                                               spec.lingauss_n, rng);
    d.split_holdout(spec.holdout_fraction);
    return d;
  }
  const std::string path = spec.dataset.substr(4);
  Tensor raw = load_idx(path);
  Rng rng = Rng(spec.seed).stream(mix_stream_id(streams::kData, 1));
  Dataset d = binarize(raw,
                       spec.binarize_mode == "threshold"
                           ? BinarizeMode::kThreshold
                           : BinarizeMode::kStochastic,
                       &rng);
  d.split_holdout(spec.holdout_fraction);
  return d;
}

Vae build_vae(const RunSpec& spec, std::size_t x_dim) {
  PosteriorSpec pspec;
  pspec.kind = posterior_kind_from_name(spec.posterior);
  pspec.z_dim = spec.latent_dim;
  pspec.h_dim = pspec.kind == PosteriorKind::kIaf ? spec.context_dim : 0;
  pspec.steps = pspec.kind == PosteriorKind::kIaf      ? spec.iaf_steps
                : pspec.kind == PosteriorKind::kPlanar ? spec.planar_steps
                                                       : 0;
  pspec.encoder_hidden = spec.enc_hidden;
  pspec.made_hidden = spec.made_hidden;
  pspec.validate();

  Rng init = Rng(spec.seed).stream(mix_stream_id(streams::kInit, 0));
  Vae vae;
  vae.gen = GenerativeModel::standard(x_dim, spec.latent_dim, spec.dec_hidden,
                                      likelihood_from_name(spec.likelihood),
                                      spec.gaussian_sigma, init);
  vae.post = Posterior(pspec, x_dim, init);
  return vae;
}

std::string arch_string(const RunSpec& spec, std::size_t x_dim) {
  std::ostringstream os;
  os << "x_dim=" << x_dim << ";posterior=" << spec.posterior
     << ";latent_dim=" << spec.latent_dim
     << ";context_dim=" << spec.context_dim << ";iaf_steps=" << spec.iaf_steps
     << ";planar_steps=" << spec.planar_steps
     << ";enc_hidden=" << join_widths(spec.enc_hidden)
     << ";dec_hidden=" << join_widths(spec.dec_hidden)
     << ";made_hidden=" << join_widths(spec.made_hidden)
     << ";likelihood=" << spec.likelihood
     << ";gaussian_sigma=" << fmt17(spec.gaussian_sigma);
  return os.str();
}

namespace {

std::size_t env_thread_cap() {
  const char* env = std::getenv("LATENTFLOW_THREADS");
  if (env == nullptr) return 1;
  try {
    return std::max<std::size_t>(1, std::stoul(env));
  } catch (const std::exception&) {
    return 1;
  }
}

TrainConfig train_config_from(const RunSpec& spec) {
  TrainConfig cfg;
  cfg.seed = spec.seed;
  cfg.batch_size = spec.batch_size;
  cfg.steps = spec.steps;
  cfg.optimizer = {optimizer_kind_from_name(spec.optimizer), spec.lr};
  cfg.free_bits_enabled = spec.free_bits >= 0.0;
  cfg.free_bits_lambda = std::max(spec.free_bits, 0.0);
  cfg.free_bits_groups = spec.free_bits_groups;
  cfg.anneal_start = 0;
  cfg.anneal_end = spec.anneal_steps;
  cfg.holdout_fraction = spec.holdout_fraction;
  cfg.eval_every = spec.eval_every;
  cfg.eval_L = spec.eval_L;
  cfg.early_stop = spec.early_stop;
  cfg.patience = spec.patience;
  cfg.log_every = spec.log_every;
  cfg.threads = env_thread_cap();
  return cfg;
}

std::filesystem::path out_file(const RunSpec& spec, const std::string& name) {
  std::filesystem::create_directories(spec.out_dir);
  return std::filesystem::path(spec.out_dir) / name;
}

Checkpoint make_checkpoint(const RunSpec& spec, Vae& vae,
                           const Optimizer& opt, std::uint64_t step,
                           std::size_t x_dim) {
  Checkpoint ckpt;
  ckpt.put("arch", arch_string(spec, x_dim));
  ckpt.put("step", step);
  ckpt.put("rng.seed", spec.seed);
  ckpt.put("opt.kind", std::string(optimizer_kind_name(opt.config().kind)));
  ckpt.put("opt.t", opt.step_count());
  vae.visit_all([&](const std::string& name, Tensor& t) {
    ckpt.put("param." + name, t);
  });
  Optimizer& mo = const_cast<Optimizer&>(opt);
  if (opt.config().kind != OptimizerKind::kSgd) {
    std::size_t k = 0;
    vae.visit_all([&](const std::string& name, Tensor&) {
      ckpt.put("opt.m." + name, mo.first_moments()[k]);
      ckpt.put("opt.v." + name, mo.second_moments()[k]);
      ++k;
    });
  }
  return ckpt;
}

void restore_from_checkpoint(const Checkpoint& ckpt, const RunSpec& spec,
                             Vae& vae, Optimizer& opt, std::size_t x_dim) {
  if (ckpt.str("arch") != arch_string(spec, x_dim))
    throw ConfigError(
        "resume: checkpoint architecture does not match the configuration\n"
        "  checkpoint: " + ckpt.str("arch") +
        "\n  config:     " + arch_string(spec, x_dim));
  vae.visit_all([&](const std::string& name, Tensor& t) {
    t = ckpt.tensor("param." + name);
  });
  opt.restore_step_count(ckpt.scalar("opt.t"));
  if (opt.config().kind != OptimizerKind::kSgd) {
    std::size_t k = 0;
    vae.visit_all([&](const std::string& name, Tensor&) {
      opt.first_moments()[k] = ckpt.tensor("opt.m." + name);
      opt.second_moments()[k] = ckpt.tensor("opt.v." + name);
      ++k;
    });
  }
}

// Shared by eval-elbo (L = 1) and estimate-loglik.
int run_loglik(const RunSpec& spec, std::size_t L) {
  Dataset data = build_dataset(spec);
  Vae vae = build_vae(spec, data.width());
  std::uint64_t seed = spec.seed;
  if (!spec.resume_path.empty()) {
    Checkpoint ckpt = load_checkpoint(spec.resume_path);
    Optimizer opt({optimizer_kind_from_name(spec.optimizer), spec.lr},
                  vae.all_params());
    restore_from_checkpoint(ckpt, spec, vae, opt, data.width());
    seed = ckpt.scalar("rng.seed");
  }
  std::vector<double> per_point(data.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng = Rng(seed).stream(mix_stream_id(streams::kEval, 0, i));
    per_point[i] = iwae_loglik_estimate(data.row(i), vae, L, rng);
    mean += per_point[i];
    std::cout << "datapoint " << i << ": " << fmt17(per_point[i]) << "\n";
  }
  mean /= static_cast<double>(data.size());
  std::cout << "L " << L << " mean " << fmt17(mean) << "\n";
  if (!spec.json_out.empty()) {
    nlohmann::json j;
    j["L"] = L;
    j["per_datapoint"] = per_point;
    j["mean"] = mean;
    std::ofstream f(spec.json_out, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + spec.json_out + "' for writing");
    f << j.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int cmd_train(const RunSpec& spec) {
  Dataset data = build_dataset(spec);
  if (likelihood_from_name(spec.likelihood) == LikelihoodKind::kBernoulli &&
      !data.binary)
    throw ConfigError("train: bernoulli likelihood needs a binary dataset");
  Vae vae = build_vae(spec, data.width());
  TrainConfig cfg = train_config_from(spec);
  Optimizer opt(cfg.optimizer, vae.all_params());
  std::uint64_t start_step = 0;

  RunSpec effective = spec;
  if (!spec.resume_path.empty()) {
    Checkpoint ckpt = load_checkpoint(spec.resume_path);
    restore_from_checkpoint(ckpt, spec, vae, opt, data.width());
    start_step = ckpt.scalar("step");
    effective.seed = ckpt.scalar("rng.seed");
    cfg.seed = effective.seed;
  }

  TrainResult result = train_aevb(data, vae, cfg, opt, start_step);

  write_metrics(out_file(spec, "metrics.csv").string(), result.history);
  save_checkpoint(out_file(spec, "checkpoint.bin").string(),
                  make_checkpoint(effective, vae, opt, result.final_step,
                                  data.width()));

  if (!result.history.empty()) {
    std::cout << "final step " << result.final_step << " train elbo "
              << fmt17(result.history.back().elbo) << "\n";
  }
  if (!result.holdout_history.empty()) {
    std::cout << "holdout elbo " << fmt17(result.holdout_history.back())
              << "\n";
  }
  if (result.early_stopped) std::cout << "early stop\n";
  if (result.diverged) {
    std::cerr << "training diverged at step " << result.final_step + 1
              << "; last finite parameters checkpointed\n";
    return 2;
  }
  return 0;
}

int cmd_eval_elbo(const RunSpec& spec) { return run_loglik(spec, 1); }

int cmd_estimate_loglik(const RunSpec& spec) {
  return run_loglik(spec, spec.L);
}

int cmd_sample(const RunSpec& spec) {
  Dataset data = build_dataset(spec);
  Vae vae = build_vae(spec, data.width());
  std::uint64_t seed = spec.seed;
  if (!spec.resume_path.empty()) {
    Checkpoint ckpt = load_checkpoint(spec.resume_path);
    Optimizer opt({optimizer_kind_from_name(spec.optimizer), spec.lr},
                  vae.all_params());
    restore_from_checkpoint(ckpt, spec, vae, opt, data.width());
    seed = ckpt.scalar("rng.seed");
  }
  Rng rng = Rng(seed).stream(mix_stream_id(streams::kEval, 1));
  Tensor rows = model_sample(vae.gen, spec.sample_n, rng,
                             spec.emit == "samples");
  const auto path = out_file(spec, "samples.csv");
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  for (std::size_t j = 0; j < data.width(); ++j)
    f << (j ? "," : "") << "x" << j;
  f << "\n";
  for (std::size_t i = 0; i < rows.dim(0); ++i) {
    for (std::size_t j = 0; j < rows.dim(1); ++j)
      f << (j ? "," : "") << fmt17(rows(i, j));
    f << "\n";
  }
  std::cout << "wrote " << rows.dim(0) << " rows to " << path.string()
            << "\n";
  return 0;
}

int cmd_gradcheck(const RunSpec& spec) {
  // Small fixed geometry: the point is coverage of every posterior family
  // and objective, not scale.
  const std::size_t x_dim = 6, z_dim = 3;
  Rng data_rng(spec.seed + 17);
  Tensor x({x_dim});
  for (std::size_t j = 0; j < x_dim; ++j)
    x(j) = data_rng.uniform() < 0.5 ? 0.0 : 1.0;

  struct Combo {
    std::string name;
    PosteriorKind kind;
    double beta;       // 1.0 for the plain elbo
    bool free_bits;
  };
  std::vector<Combo> combos;
  for (PosteriorKind kind :
       {PosteriorKind::kDiagGaussian, PosteriorKind::kFullCov,
        PosteriorKind::kPlanar, PosteriorKind::kIaf}) {
    combos.push_back({std::string(posterior_kind_name(kind)) + "/elbo", kind,
                      1.0, false});
    combos.push_back({std::string(posterior_kind_name(kind)) + "/annealed",
                      kind, 0.7, false});
  }
  combos.push_back({"diag/free-bits", PosteriorKind::kDiagGaussian, 1.0,
                    true});

  bool ok = true;
  for (const Combo& combo : combos) {
    PosteriorSpec pspec;
    pspec.kind = combo.kind;
    pspec.z_dim = z_dim;
    pspec.h_dim = combo.kind == PosteriorKind::kIaf ? 3 : 0;
    pspec.steps = pspec.is_chain() ? 2 : 0;
    pspec.encoder_hidden = {8};
    pspec.made_hidden = {6};
    Rng init = Rng(spec.seed).stream(mix_stream_id(streams::kInit, 99));
    Vae vae;
    vae.gen = GenerativeModel::standard(x_dim, z_dim, {8},
                                        LikelihoodKind::kBernoulli, 1.0, init);
    vae.post = Posterior(pspec, x_dim, init);

    Rng noise = Rng(spec.seed).stream(mix_stream_id(streams::kEps, 7));
    const Tensor eps = noise.normal_tensor({z_dim});
    const Tensor eps2 = noise.normal_tensor({z_dim});

    auto loss = [&](Tape& t) -> Var {
      if (combo.free_bits) {
        std::vector<Tensor> xs{x, x};
        std::vector<Tensor> es{eps, eps2};
        return build_free_bits_graph(t, xs, vae, 0.05, 3, es).objective;
      }
      return build_elbo_graph(t, x, vae, eps, combo.beta).objective;
    };

    // Per-parameter errors so the worst offender can be reported.
    double worst = 0.0;
    std::string worst_name = "-";
    vae.visit_all([&](const std::string& name, Tensor& param) {
      Tensor* ptr = &param;
      const double err = grad_check(loss, std::span<Tensor* const>(&ptr, 1),
                                    1e-5);
      if (err > worst) {
        worst = err;
        worst_name = name;
      }
    });
    const bool pass = worst < 1e-5;
    ok = ok && pass;
    std::cout << (pass ? "PASS" : "FAIL") << " " << combo.name
              << " max-rel-err " << fmt17(worst) << " worst-param "
              << worst_name << "\n";
  }
  return ok ? 0 : 1;
}

int cmd_compare_estimators(const RunSpec& spec) {
  if (spec.latent_dim > 4)
    throw ConfigError(
        "compare-estimators: latent_dim capped at 4 to keep the statistical "
        "oracles honest");
  Dataset data = build_dataset(spec);
  if (spec.posterior != "diag")
    throw ConfigError("compare-estimators: requires posterior=diag");
  Vae vae = build_vae(spec, data.width());
  const Tensor x = data.row(0);

  const std::size_t n = spec.compare_n;
  std::vector<std::string> names;
  std::vector<std::vector<double>> rep_cols, score_cols;
  Rng rep_rng = Rng(spec.seed).stream(mix_stream_id(streams::kEval, 2));
  Rng score_rng = Rng(spec.seed).stream(mix_stream_id(streams::kEval, 3));
  for (std::size_t i = 0; i < n; ++i) {
    ElboGradients g = elbo_gradient(x, vae, rep_rng);
    NamedGrads s = score_function_gradient(x, vae, score_rng);
    if (names.empty()) {
      for (const auto& [name, t] : g.phi.items)
        for (std::size_t e = 0; e < t.size(); ++e)
          names.push_back(name + "[" + std::to_string(e) + "]");
      rep_cols.assign(names.size(), {});
      score_cols.assign(names.size(), {});
    }
    std::size_t c = 0;
    for (const auto& [name, t] : g.phi.items)
      for (std::size_t e = 0; e < t.size(); ++e) rep_cols[c++].push_back(t[e]);
    c = 0;
    for (const auto& [name, t] : s.items)
      for (std::size_t e = 0; e < t.size(); ++e)
        score_cols[c++].push_back(t[e]);
  }

  auto stats = [&](const std::vector<double>& xs) {
    double m = 0, v = 0;
    for (double q : xs) m += q;
    m /= static_cast<double>(xs.size());
    for (double q : xs) v += (q - m) * (q - m);
    v /= static_cast<double>(xs.size() - 1);
    return std::pair<double, double>(m, v);
  };

  const auto path = out_file(spec, "estimators.csv");
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << "coordinate,reparam_mean,reparam_var,score_mean,score_var\n";
  double rep_var_total = 0, score_var_total = 0, worst_z = 0;
  for (std::size_t c = 0; c < names.size(); ++c) {
    const auto [rm, rv] = stats(rep_cols[c]);
    const auto [sm, sv] = stats(score_cols[c]);
    rep_var_total += rv;
    score_var_total += sv;
    const double se =
        std::sqrt((rv + sv) / static_cast<double>(n));
    if (se > 0) worst_z = std::max(worst_z, std::abs(rm - sm) / se);
    f << names[c] << ',' << fmt17(rm) << ',' << fmt17(rv) << ',' << fmt17(sm)
      << ',' << fmt17(sv) << "\n";
  }
  const double ratio = score_var_total / rep_var_total;
  std::cout << "samples " << n << "\n";
  std::cout << "max |mean difference| z-score " << fmt17(worst_z) << "\n";
  std::cout << "variance ratio (score/reparam) " << fmt17(ratio) << "\n";
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

namespace {

int dispatch(const RunSpec& spec) {
  if (spec.command == "train") return cmd_train(spec);
  if (spec.command == "eval-elbo") return cmd_eval_elbo(spec);
  if (spec.command == "estimate-loglik") return cmd_estimate_loglik(spec);
  if (spec.command == "sample") return cmd_sample(spec);
  if (spec.command == "gradcheck") return cmd_gradcheck(spec);
  if (spec.command == "compare-estimators")
    return cmd_compare_estimators(spec);
  throw ConfigError("unknown command '" + spec.command + "'");
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"latentflow: train and evaluate deep latent-variable models "
               "with amortized variational inference"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir, resume, posterior, dataset;
  std::optional<std::uint64_t> seed, iaf_steps, anneal_steps, L;
  std::optional<double> free_bits;
  bool corrupt_backward = false;

  app.add_option("--config", config_path, "flat key=value config file");
  app.add_option("--seed", seed, "rng seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--resume", resume, "checkpoint to resume/evaluate from");
  app.add_option("--L", L, "importance samples for estimate-loglik");
  app.add_option("--posterior", posterior, "diag|fullcov|planar|iaf");
  app.add_option("--iaf-steps", iaf_steps, "IAF chain length");
  app.add_option("--free-bits", free_bits, "free-bits lambda (>= 0)");
  app.add_option("--anneal-steps", anneal_steps, "KL anneal horizon");
  app.add_option("--dataset", dataset, "toy4|lingauss|idx:PATH");
  app.add_flag("--corrupt-backward", corrupt_backward)->group("");

  for (const char* name :
       {"train", "eval-elbo", "estimate-loglik", "sample", "gradcheck",
        "compare-estimators"}) {
    app.add_subcommand(name)->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    RunSpec spec =
        config_path.empty() ? RunSpec{} : parse_config(config_path);
    spec.command = app.get_subcommands().front()->get_name();
    if (seed) apply_key(spec, "seed", std::to_string(*seed));
    if (out_dir) apply_key(spec, "out", *out_dir);
    if (resume) apply_key(spec, "resume", *resume);
    if (L) apply_key(spec, "L", std::to_string(*L));
    if (posterior) apply_key(spec, "posterior", *posterior);
    if (iaf_steps) apply_key(spec, "iaf_steps", std::to_string(*iaf_steps));
    if (free_bits) apply_key(spec, "free_bits", fmt17(*free_bits));
    if (anneal_steps)
      apply_key(spec, "anneal_steps", std::to_string(*anneal_steps));
    if (dataset) apply_key(spec, "dataset", *dataset);
    spec.validate();
    if (corrupt_backward) detail::backward_corruption() = 1.05;
    const int code = dispatch(spec);
    detail::backward_corruption() = 1.0;
    return code;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("latentflow");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace latentflow::cli

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentflow/data_io.hpp"
#include "latentflow/objectives.hpp"

namespace latentflow::cli {

// Fully resolved run description: defaults, then config-file keys, then
// command-line flag overrides.
struct RunSpec {
  std::string command;

  // dataset
  std::string dataset = "toy4";  // toy4 | lingauss | idx:PATH
  std::string binarize_mode = "threshold";  // threshold | stochastic
  std::size_t lingauss_n = 1000;
  std::size_t lingauss_dx = 3;
  std::size_t lingauss_dz = 2;
  double lingauss_sigma = 1.0;

  // model
  std::string posterior = "diag";
  std::size_t latent_dim = 2;
  std::size_t context_dim = 0;
  std::size_t iaf_steps = 2;
  std::size_t planar_steps = 2;
  std::vector<std::size_t> enc_hidden{64, 64};
  std::vector<std::size_t> dec_hidden{64, 64};
  std::vector<std::size_t> made_hidden{64, 64};
  std::string likelihood = "bernoulli";
  double gaussian_sigma = 1.0;

  // training
  std::uint64_t steps = 1000;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  std::string optimizer = "adam";
  std::uint64_t seed = 0;
  double free_bits = -1.0;  // negative disables the free-bits objective
  std::size_t free_bits_groups = 1;
  std::uint64_t anneal_steps = 0;
  double holdout_fraction = 0.0;
  std::size_t eval_every = 100;
  std::size_t eval_L = 1;
  bool early_stop = false;
  std::size_t patience = 10;
  std::size_t log_every = 1;

  // eval / sample / compare
  std::size_t L = 1;
  std::size_t sample_n = 16;
  std::string emit = "means";  // means | samples
  std::size_t compare_n = 20000;
  std::string json_out;

  // paths
  std::string out_dir = ".";
  std::string resume_path;

  void validate() const;  // range checks and path existence
};

// Applies one `key=value` pair; throws ConfigError on unknown keys, type
// errors and range errors.
void apply_key(RunSpec& spec, const std::string& key,
               const std::string& value);

// Flat key=value file; '#' starts a comment. Errors carry the line number.
RunSpec parse_config(const std::string& path);

// Exit codes: 0 success, 1 validation, 2 runtime divergence, 3 IO.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

// Individual commands, exposed for in-process testing.
int cmd_train(const RunSpec& spec);
int cmd_eval_elbo(const RunSpec& spec);
int cmd_estimate_loglik(const RunSpec& spec);
int cmd_sample(const RunSpec& spec);
int cmd_gradcheck(const RunSpec& spec);
int cmd_compare_estimators(const RunSpec& spec);

// Model/dataset assembly shared by the commands.
Dataset build_dataset(const RunSpec& spec);
Vae build_vae(const RunSpec& spec, std::size_t x_dim);
std::string arch_string(const RunSpec& spec, std::size_t x_dim);

}  // namespace latentflow::cli

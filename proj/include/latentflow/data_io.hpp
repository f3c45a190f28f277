#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/rng.hpp"
#include "latentflow/tensor.hpp"

namespace latentflow {

// Rows are datapoints. Binary datasets contain only {0,1} entries.
struct Dataset {
  Tensor items;  // (N, D)
  bool binary = false;
  std::vector<std::size_t> holdout;  // indices into items

  std::size_t size() const { return items.dim(0); }
  std::size_t width() const { return items.dim(1); }
  Tensor row(std::size_t i) const;
  // Deterministic last-fraction split; returns training indices and fills
  // `holdout` with the rest.
  std::vector<std::size_t> train_indices() const;
  void split_holdout(double fraction);
};

// The four 2-bit patterns 00, 01, 10, 11, each bit widened by repetition to
// 16 binary pixels; pairwise Hamming distance at least 8.
Dataset make_toy_four_points();

// x = W z + sigma * noise, z and noise standard normal.
Dataset make_linear_gaussian_synthetic(const Tensor& w, double sigma,
                                       std::size_t n, Rng& rng);

// Big-endian IDX file of unsigned bytes (dtype 0x08), scaled to [0,1].
Tensor load_idx(const std::string& path);

enum class BinarizeMode { kThreshold, kStochastic };

// Threshold mode rounds ties (exactly 0.5) up. Input must lie in [0,1];
// rng is only consulted in stochastic mode.
Dataset binarize(const Tensor& data, BinarizeMode mode, Rng* rng);

// Named-section checkpoint container. Sections keep insertion order so a
// load/save round trip is byte identical.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<std::pair<std::string, std::uint64_t>> scalars;
  std::vector<std::pair<std::string, std::string>> strings;

  void put(const std::string& name, Tensor t);
  void put(const std::string& name, std::uint64_t v);
  void put(const std::string& name, std::string s);
  const Tensor& tensor(const std::string& name) const;
  std::uint64_t scalar(const std::string& name) const;
  const std::string& str(const std::string& name) const;
  bool has_tensor(const std::string& name) const;

  bool operator==(const Checkpoint& other) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary format: magic, version, length-prefixed named sections of
// little-endian payloads, trailing CRC32 over everything before it.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// One training-loop log record; see write_metrics for the column order.
struct StepRecord {
  std::uint64_t step = 0;
  double elbo = 0.0;
  double logpx = 0.0;
  double logpz = 0.0;
  double logqz = 0.0;
  double kl_est = 0.0;
  double grad_norm = 0.0;
  double beta = 1.0;
};

// CSV with header step,elbo,logpx,logpz,logqz,kl_est,grad_norm,beta.
// Values are printed with 17 significant digits so they re-parse exactly.
void write_metrics(const std::string& path,
                   const std::vector<StepRecord>& history);

std::uint32_t crc32(const unsigned char* data, std::size_t len);

}  // namespace latentflow

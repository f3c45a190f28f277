#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "latentflow/tensor.hpp"

namespace latentflow {

// Mixes distinct integers into a single substream id.
std::uint64_t mix_stream_id(std::uint64_t a, std::uint64_t b = 0,
                            std::uint64_t c = 0);

// Seeded random stream: xoshiro256** state derived from (seed, stream id)
// via splitmix64, normals by Box-Muller. The same (seed, stream) always
// produces the same sequence, on any platform, and substreams derived from
// one seed are independent of how much the parent stream was consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : Rng(seed, 0) {}
  Rng(std::uint64_t seed, std::uint64_t stream_id);

  // Derived substream over the same base seed.
  Rng stream(std::uint64_t stream_id) const { return Rng(seed_, stream_id); }

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double normal();   // standard normal, Box-Muller with cached spare
  Tensor normal_tensor(std::vector<std::size_t> shape);
  Tensor uniform_tensor(std::vector<std::size_t> shape, double lo, double hi);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace latentflow

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/rng.hpp"
#include "latentflow/tape.hpp"
#include "latentflow/tensor.hpp"

namespace latentflow {

enum class Activation { kLinear, kTanh, kSigmoid, kSoftplus };

Activation activation_from_name(const std::string& name);

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

struct DenseLayer {
  Tensor W;
  Tensor b;
  Activation act = Activation::kLinear;
};

// Plain fully connected network. Weights start at uniform(-a, a) with
// a = sqrt(6 / (fan_in + fan_out)), biases at zero.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::vector<std::size_t>& widths,
      const std::vector<Activation>& acts, Rng& rng);
  // Hidden layers all use `hidden_act`, the final layer is linear.
  static Mlp with_linear_head(std::size_t in, const std::vector<std::size_t>&
                              hidden, std::size_t out, Activation hidden_act,
                              Rng& rng);

  Var forward(Tape& tape, Var x);
  std::size_t in_width() const { return layers_.front().W.dim(1); }
  std::size_t out_width() const { return layers_.back().W.dim(0); }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  void visit_params(const std::string& prefix, const ParamVisitor& visit);
  std::size_t param_count() const;

 private:
  std::vector<DenseLayer> layers_;
};

Var apply_activation(Var v, Activation act);

// Widths of the encoder's output heads: mean, log sigma, optional context h,
// optional raw triangular factor.
struct HeadSpec {
  std::size_t z_dim = 0;
  std::size_t h_dim = 0;
  bool full_cov = false;
  std::size_t out_width() const {
    return 2 * z_dim + h_dim + (full_cov ? z_dim * z_dim : 0);
  }
};

struct EncoderOut {
  Var mu;
  Var log_sigma;  // clamped to [-kLogSigmaBound, kLogSigmaBound]
  Var h;          // valid() only when h_dim > 0
  Var l_raw;      // valid() only for full-covariance heads, shape (D,D)
};

// Splits the encoder's final linear layer into heads.
EncoderOut encoder_forward(Tape& tape, Mlp& enc, Var x, const HeadSpec& heads);

// Bernoulli means: sigmoid over the decoder output, clamped into (0,1).
Var decoder_forward(Tape& tape, Mlp& dec, Var z);

// Connectivity masks that make a stack of dense layers autoregressive over
// its input under a given ordering. ordering[j] is the 1-based autoregressive
// position of input j; outputs at position i may depend only on inputs at
// positions strictly below i.
struct MadeMasks {
  std::vector<Tensor> hidden;  // one per hidden layer
  Tensor output;               // last hidden (or input) -> each output head
  bool degenerate = false;     // dim < 2: no intra-z connectivity at all
};

MadeMasks build_made_masks(std::size_t dim,
                           const std::vector<std::size_t>& hidden_widths,
                           const std::vector<std::size_t>& ordering);

std::vector<std::size_t> identity_ordering(std::size_t dim);
std::vector<std::size_t> reversed_ordering(std::size_t dim);

struct MadeConfig {
  std::size_t dim = 0;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t context_dim = 0;
  Activation act = Activation::kTanh;
  double s_bias_init = 2.0;  // keeps early flow steps close to the identity
};

// MADE-style network with two output heads (m, s) of width dim. The context
// input h is unmasked: it feeds every hidden layer through a full matrix,
// or the heads directly when there are no hidden layers.
class MaskedNet {
 public:
  MaskedNet() = default;
  MaskedNet(MadeConfig cfg, std::vector<std::size_t> ordering, Rng& rng);

  std::pair<Var, Var> forward(Tape& tape, Var z, std::optional<Var> h);
  void visit_params(const std::string& prefix, const ParamVisitor& visit);
  std::size_t param_count() const;
  const MadeConfig& config() const { return cfg_; }
  const std::vector<std::size_t>& ordering() const { return ordering_; }
  const MadeMasks& masks() const { return masks_; }

  // Direct parameter access for tests and the linear-flow construction.
  std::vector<Tensor>& hidden_W() { return W_; }
  std::vector<Tensor>& hidden_U() { return U_; }
  std::vector<Tensor>& hidden_b() { return b_; }
  Tensor& m_W() { return mW_; }
  Tensor& m_b() { return mb_; }
  Tensor& s_W() { return sW_; }
  Tensor& s_b() { return sb_; }
  Tensor& m_U() { return mU_; }
  Tensor& s_U() { return sU_; }

 private:
  MadeConfig cfg_;
  std::vector<std::size_t> ordering_;
  MadeMasks masks_;
  std::vector<Tensor> W_, U_, b_;  // hidden layers
  Tensor mW_, mb_, sW_, sb_;       // output heads
  Tensor mU_, sU_;                 // context into heads (no-hidden case)
};

std::pair<Var, Var> made_forward(Tape& tape, MaskedNet& net, Var z,
                                 std::optional<Var> h);

}  // namespace latentflow

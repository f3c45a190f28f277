#include "latentflow/networks.hpp"

#include <cmath>

#include "latentflow/distributions.hpp"
#include "latentflow/errors.hpp"

namespace latentflow {

namespace {

Tensor glorot_uniform(std::size_t out, std::size_t in, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  return rng.uniform_tensor({out, in}, -a, a);
}

}  // namespace

Activation activation_from_name(const std::string& name) {
  if (name == "linear") return Activation::kLinear;
  if (name == "tanh") return Activation::kTanh;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "softplus") return Activation::kSoftplus;
  throw ConfigError("unknown activation '" + name + "'");
}

Var apply_activation(Var v, Activation act) {
  switch (act) {
    case Activation::kLinear: return v;
    case Activation::kTanh: return vtanh(v);
    case Activation::kSigmoid: return sigmoid(v);
    case Activation::kSoftplus: return softplus(v);
  }
  return v;
}

Mlp::Mlp(const std::vector<std::size_t>& widths,
         const std::vector<Activation>& acts, Rng& rng) {
  if (widths.size() < 2 || acts.size() != widths.size() - 1) {
    throw ConfigError("mlp: need n+1 widths for n activations");
  }
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    DenseLayer layer;
    layer.W = glorot_uniform(widths[l + 1], widths[l], rng);
    layer.b = Tensor::zeros({widths[l + 1]});
    layer.act = acts[l];
    layers_.push_back(std::move(layer));
  }
}

Mlp Mlp::with_linear_head(std::size_t in,
                          const std::vector<std::size_t>& hidden,
                          std::size_t out, Activation hidden_act, Rng& rng) {
  std::vector<std::size_t> widths{in};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(out);
  std::vector<Activation> acts(hidden.size(), hidden_act);
  acts.push_back(Activation::kLinear);
  return Mlp(widths, acts, rng);
}

Var Mlp::forward(Tape& tape, Var x) {
  if (x.value().rank() != 1 || x.value().dim(0) != in_width()) {
    throw ShapeError("mlp: input " + x.value().shape_str() + ", expected (" +
                     std::to_string(in_width()) + ")");
  }
  Var a = x;
  for (auto& layer : layers_) {
    a = apply_activation(matmul(tape.param(layer.W), a) + tape.param(layer.b),
                         layer.act);
  }
  return a;
}

void Mlp::visit_params(const std::string& prefix, const ParamVisitor& visit) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    visit(prefix + ".l" + std::to_string(l) + ".W", layers_[l].W);
    visit(prefix + ".l" + std::to_string(l) + ".b", layers_[l].b);
  }
}

std::size_t Mlp::param_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.W.size() + layer.b.size();
  return n;
}

EncoderOut encoder_forward(Tape& tape, Mlp& enc, Var x,
                           const HeadSpec& heads) {
  if (enc.out_width() != heads.out_width()) {
    throw ShapeError("encoder: output width " +
                     std::to_string(enc.out_width()) + " != head layout " +
                     std::to_string(heads.out_width()));
  }
  Var out = enc.forward(tape, x);
  EncoderOut res;
  std::size_t at = 0;
  res.mu = slice(out, at, heads.z_dim);
  at += heads.z_dim;
  res.log_sigma = clamp(slice(out, at, heads.z_dim), -kLogSigmaBound,
                        kLogSigmaBound);
  at += heads.z_dim;
  if (heads.h_dim > 0) {
    res.h = slice(out, at, heads.h_dim);
    at += heads.h_dim;
  }
  if (heads.full_cov) {
    res.l_raw = reshape(slice(out, at, heads.z_dim * heads.z_dim),
                        {heads.z_dim, heads.z_dim});
  }
  return res;
}

Var decoder_forward(Tape& tape, Mlp& dec, Var z) {
  Var logits = dec.forward(tape, z);
  return clamp(sigmoid(logits), kBernoulliEps, 1.0 - kBernoulliEps);
}

std::vector<std::size_t> identity_ordering(std::size_t dim) {
  std::vector<std::size_t> ord(dim);
  for (std::size_t i = 0; i < dim; ++i) ord[i] = i + 1;
  return ord;
}

std::vector<std::size_t> reversed_ordering(std::size_t dim) {
  std::vector<std::size_t> ord(dim);
  for (std::size_t i = 0; i < dim; ++i) ord[i] = dim - i;
  return ord;
}

MadeMasks build_made_masks(std::size_t dim,
                           const std::vector<std::size_t>& hidden_widths,
                           const std::vector<std::size_t>& ordering) {
  if (ordering.size() != dim) {
    throw ConfigError("made masks: ordering size " +
                      std::to_string(ordering.size()) + " != dim " +
                      std::to_string(dim));
  }
  MadeMasks masks;
  masks.degenerate = dim < 2;
  // Hidden degrees cycle deterministically through 1..dim-1.
  std::vector<std::size_t> prev_deg = ordering;
  const std::size_t max_hidden_deg = dim >= 2 ? dim - 1 : 0;
  std::vector<std::size_t> cur_deg;
  for (std::size_t w : hidden_widths) {
    cur_deg.assign(w, 0);
    for (std::size_t u = 0; u < w; ++u)
      cur_deg[u] = max_hidden_deg == 0 ? 0 : 1 + (u % max_hidden_deg);
    Tensor mask({w, prev_deg.size()});
    for (std::size_t u = 0; u < w; ++u)
      for (std::size_t j = 0; j < prev_deg.size(); ++j)
        mask(u, j) = cur_deg[u] >= prev_deg[j] ? 1.0 : 0.0;
    masks.hidden.push_back(std::move(mask));
    prev_deg = cur_deg;
  }
  // Output heads connect strictly: position i sees degrees < i only.
  Tensor out_mask({dim, prev_deg.size()});
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < prev_deg.size(); ++j)
      out_mask(i, j) = ordering[i] > prev_deg[j] ? 1.0 : 0.0;
  masks.output = std::move(out_mask);
  return masks;
}

MaskedNet::MaskedNet(MadeConfig cfg, std::vector<std::size_t> ordering,
                     Rng& rng)
    : cfg_(std::move(cfg)), ordering_(std::move(ordering)) {
  masks_ = build_made_masks(cfg_.dim, cfg_.hidden, ordering_);
  std::size_t prev = cfg_.dim;
  for (std::size_t w : cfg_.hidden) {
    W_.push_back(glorot_uniform(w, prev, rng));
    if (cfg_.context_dim > 0)
      U_.push_back(glorot_uniform(w, cfg_.context_dim, rng));
    b_.push_back(Tensor::zeros({w}));
    prev = w;
  }
  mW_ = glorot_uniform(cfg_.dim, prev, rng);
  mb_ = Tensor::zeros({cfg_.dim});
  sW_ = glorot_uniform(cfg_.dim, prev, rng);
  sb_ = Tensor::full({cfg_.dim}, cfg_.s_bias_init);
  if (cfg_.hidden.empty() && cfg_.context_dim > 0) {
    mU_ = glorot_uniform(cfg_.dim, cfg_.context_dim, rng);
    sU_ = glorot_uniform(cfg_.dim, cfg_.context_dim, rng);
  }
}

std::pair<Var, Var> MaskedNet::forward(Tape& tape, Var z,
                                       std::optional<Var> h) {
  if (z.value().rank() != 1 || z.value().dim(0) != cfg_.dim) {
    throw ShapeError("made: input " + z.value().shape_str() + ", expected (" +
                     std::to_string(cfg_.dim) + ")");
  }
  if (cfg_.context_dim > 0 &&
      (!h.has_value() || h->value().dim(0) != cfg_.context_dim)) {
    throw ShapeError("made: context of width " +
                     std::to_string(cfg_.context_dim) + " required");
  }
  Var a = z;
  for (std::size_t l = 0; l < W_.size(); ++l) {
    Var pre = matmul(tape.param(W_[l]) * tape.constant(masks_.hidden[l]), a);
    if (cfg_.context_dim > 0) pre = pre + matmul(tape.param(U_[l]), *h);
    a = apply_activation(pre + tape.param(b_[l]), cfg_.act);
  }
  Var mask_out = tape.constant(masks_.output);
  Var m = matmul(tape.param(mW_) * mask_out, a) + tape.param(mb_);
  Var s = matmul(tape.param(sW_) * mask_out, a) + tape.param(sb_);
  if (cfg_.hidden.empty() && cfg_.context_dim > 0) {
    m = m + matmul(tape.param(mU_), *h);
    s = s + matmul(tape.param(sU_), *h);
  }
  return {m, s};
}

void MaskedNet::visit_params(const std::string& prefix,
                             const ParamVisitor& visit) {
  for (std::size_t l = 0; l < W_.size(); ++l) {
    const std::string base = prefix + ".l" + std::to_string(l);
    visit(base + ".W", W_[l]);
    if (cfg_.context_dim > 0) visit(base + ".U", U_[l]);
    visit(base + ".b", b_[l]);
  }
  visit(prefix + ".m.W", mW_);
  visit(prefix + ".m.b", mb_);
  visit(prefix + ".s.W", sW_);
  visit(prefix + ".s.b", sb_);
  if (cfg_.hidden.empty() && cfg_.context_dim > 0) {
    visit(prefix + ".m.U", mU_);
    visit(prefix + ".s.U", sU_);
  }
}

std::size_t MaskedNet::param_count() const {
  std::size_t n = 0;
  for (const auto& w : W_) n += w.size();
  for (const auto& u : U_) n += u.size();
  for (const auto& b : b_) n += b.size();
  n += mW_.size() + mb_.size() + sW_.size() + sb_.size();
  n += mU_.size() + sU_.size();
  return n;
}

std::pair<Var, Var> made_forward(Tape& tape, MaskedNet& net, Var z,
                                 std::optional<Var> h) {
  return net.forward(tape, z, std::move(h));
}

}  // namespace latentflow

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "latentflow/tensor.hpp"

namespace latentflow {

class Tape;

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kMatmul,
  kExp,
  kLog,
  kSigmoid,
  kTanh,
  kSoftplus,
  kSum,
  kMean,
  kSlice,
  kConcat,
  kReshape,
  kTranspose,
  kBroadcastAdd,
  kScale,
  kShift,
  kClamp,
  kReverse,
};

const char* op_name(Op op);

// Handle to one node of a tape. Cheap to copy, valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  friend Var make_node(Tape& tape, Op op, int in0, int in1, double c0,
                       double c1, std::int64_t i0, std::int64_t i1,
                       std::vector<std::size_t> shape_attr);
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode automatic differentiation over a record of tensor ops.
// Construction runs the forward pass eagerly and records everything needed
// for backward(); recompute() replays the recorded ops from the current
// leaf values, bit-exactly, which is what grad_check uses for central
// differences. A tape is single-threaded; build one per datapoint/thread.
class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Binds an externally owned parameter tensor as a leaf (value copied).
  // Binding the same tensor twice returns the same node.
  Var param(Tensor& t);

  void backward(Var scalar_output);
  void recompute();

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  const Tensor& grad_for(const Tensor& t) const;
  bool has_binding(const Tensor& t) const;
  // Mutable access to a bound leaf's recorded value (used to perturb
  // parameters for finite differences before recompute()).
  Tensor& leaf_value(const Tensor& t);

  const std::vector<std::pair<Tensor*, int>>& bindings() const {
    return bindings_;
  }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend class Var;
  friend Var make_node(Tape& tape, Op op, int in0, int in1, double c0,
                       double c1, std::int64_t i0, std::int64_t i1,
                       std::vector<std::size_t> shape_attr);

  struct Node {
    Op op = Op::kLeaf;
    int in0 = -1;
    int in1 = -1;
    Tensor value;
    Tensor grad;
    double c0 = 0.0;   // scale factor / shift amount / clamp lo
    double c1 = 0.0;   // clamp hi
    std::int64_t i0 = 0;  // slice start
    std::int64_t i1 = 0;  // slice length
    std::vector<std::size_t> shape_attr;  // reshape target
    bool is_param = false;
  };

  void eval_node(Node& node);
  void backprop_node(int id);
  int add_node(Node node);
  const Node& node(int id) const { return nodes_[id]; }

  std::vector<Node> nodes_;
  std::vector<std::pair<Tensor*, int>> bindings_;
  bool grads_ready_ = false;
};

// Graph-building operations. Binary elementwise ops accept equal shapes, or
// a rank-0 scalar on either side (broadcast).
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator-(Var a);
Var matmul(Var a, Var b);
Var vexp(Var a);
Var vlog(Var a);  // input clamped at 1e-12
Var sigmoid(Var a);
Var vtanh(Var a);
Var softplus(Var a);
Var sum(Var a);
Var mean(Var a);
Var slice(Var a, std::size_t start, std::size_t len);  // along axis 0
Var concat(Var a, Var b);                               // along axis 0
Var reshape(Var a, std::vector<std::size_t> shape);
Var transpose(Var a);
Var broadcast_add(Var m, Var v);  // (r,c) + (c) row-wise
Var scale(Var a, double c);
Var shift(Var a, double c);
Var clamp(Var a, double lo, double hi);
Var reverse(Var a);  // rank-1 element order reversal
Var dot(Var a, Var b);

constexpr double kLogClampMin = 1e-12;

// Compares autodiff gradients of a deterministic scalar loss against central
// finite differences, replaying the recorded forward pass with perturbed
// leaves. Returns max over all parameter entries of
// |autodiff - central| / max(1, |central|).
double grad_check(const std::function<Var(Tape&)>& build_loss,
                  std::span<Tensor* const> params, double fd_step);

namespace detail {
// Test harness hook: scales the tanh backward rule so gradient checking can
// be shown to catch a corrupted derivative. Leave at 1.0 in normal use.
double& backward_corruption();
}  // namespace detail

}  // namespace latentflow

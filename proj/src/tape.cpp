#include "latentflow/tape.hpp"

#include <cmath>
#include <string>

#include "latentflow/errors.hpp"

namespace latentflow {

namespace detail {
double& backward_corruption() {
  static double scale = 1.0;
  return scale;
}
}  // namespace detail

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kNeg: return "neg";
    case Op::kMatmul: return "matmul";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kSoftplus: return "softplus";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSlice: return "slice";
    case Op::kConcat: return "concat";
    case Op::kReshape: return "reshape";
    case Op::kTranspose: return "transpose";
    case Op::kBroadcastAdd: return "broadcast_add";
    case Op::kScale: return "scale";
    case Op::kShift: return "shift";
    case Op::kClamp: return "clamp";
    case Op::kReverse: return "reverse";
  }
  return "?";
}

const Tensor& Var::value() const { return tape_->value(*this); }

namespace {

[[noreturn]] void shape_fail(Op op, int id, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": node " + std::to_string(id) +
                   ": " + detail);
}

double stable_sigmoid(double x) { return 0.5 * (1.0 + std::tanh(0.5 * x)); }

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// Elementwise binary ops allow a rank-0 scalar on either side.
enum class BinMode { kSame, kScalarLeft, kScalarRight };

BinMode bin_mode(const Tensor& a, const Tensor& b, Op op, int id) {
  if (a.same_shape(b)) return BinMode::kSame;
  if (a.is_scalar()) return BinMode::kScalarLeft;
  if (b.is_scalar()) return BinMode::kScalarRight;
  shape_fail(op, id, "shapes " + a.shape_str() + " and " + b.shape_str() +
                         " are not compatible");
}

}  // namespace

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return Var(this, add_node(std::move(n)));
}

Var Tape::param(Tensor& t) {
  for (const auto& [ptr, id] : bindings_) {
    if (ptr == &t) return Var(this, id);
  }
  Node n;
  n.op = Op::kLeaf;
  n.value = t;
  n.is_param = true;
  int id = add_node(std::move(n));
  bindings_.emplace_back(&t, id);
  return Var(this, id);
}

int Tape::add_node(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

const Tensor& Tape::value(Var v) const { return nodes_[v.id()].value; }

const Tensor& Tape::grad(Var v) const {
  if (!grads_ready_) throw Error("tape: backward() has not been run");
  return nodes_[v.id()].grad;
}

const Tensor& Tape::grad_for(const Tensor& t) const {
  if (!grads_ready_) throw Error("tape: backward() has not been run");
  for (const auto& [ptr, id] : bindings_) {
    if (ptr == &t) return nodes_[id].grad;
  }
  throw Error("tape: tensor is not bound as a parameter");
}

bool Tape::has_binding(const Tensor& t) const {
  for (const auto& [ptr, id] : bindings_) {
    if (ptr == &t) return true;
  }
  return false;
}

Tensor& Tape::leaf_value(const Tensor& t) {
  for (const auto& [ptr, id] : bindings_) {
    if (ptr == &t) return nodes_[id].value;
  }
  throw Error("tape: tensor is not bound as a parameter");
}

void Tape::eval_node(Node& n) {
  const Tensor* a = n.in0 >= 0 ? &nodes_[n.in0].value : nullptr;
  const Tensor* b = n.in1 >= 0 ? &nodes_[n.in1].value : nullptr;
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      const BinMode mode = bin_mode(*a, *b, n.op, -1);
      const Tensor& big = mode == BinMode::kScalarLeft ? *b : *a;
      if (!n.value.same_shape(big)) n.value = Tensor(big.shape());
      for (std::size_t i = 0; i < big.size(); ++i) {
        const double x = mode == BinMode::kScalarLeft ? (*a)[0] : (*a)[i];
        const double y = mode == BinMode::kScalarRight ? (*b)[0] : (*b)[i];
        n.value[i] = n.op == Op::kAdd   ? x + y
                     : n.op == Op::kSub ? x - y
                                        : x * y;
      }
      break;
    }
    case Op::kNeg: {
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i) n.value[i] = -(*a)[i];
      break;
    }
    case Op::kMatmul:
      n.value = matmul(*a, *b);
      break;
    case Op::kExp: {
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i)
        n.value[i] = std::exp((*a)[i]);
      break;
    }
    case Op::kLog: {
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i)
        n.value[i] = std::log(std::max((*a)[i], kLogClampMin));
      break;
    }
    case Op::kSigmoid: {
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i)
        n.value[i] = stable_sigmoid((*a)[i]);
      break;
    }
    case Op::kTanh: {
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i)
        n.value[i] = std::tanh((*a)[i]);
      break;
    }
    case Op::kSoftplus: {
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i)
        n.value[i] = stable_softplus((*a)[i]);
      break;
    }
    case Op::kSum: {
      n.value = Tensor::scalar(sum_all(*a));
      break;
    }
    case Op::kMean: {
      n.value = Tensor::scalar(sum_all(*a) /
                               static_cast<double>(std::max<std::size_t>(
                                   a->size(), 1)));
      break;
    }
    case Op::kSlice: {
      const auto start = static_cast<std::size_t>(n.i0);
      const auto len = static_cast<std::size_t>(n.i1);
      if (a->rank() == 1) {
        if (!n.value.same_shape(Tensor({len}))) n.value = Tensor({len});
        for (std::size_t i = 0; i < len; ++i) n.value(i) = (*a)(start + i);
      } else {
        const std::size_t cols = a->dim(1);
        if (n.value.rank() != 2 || n.value.dim(0) != len)
          n.value = Tensor({len, cols});
        for (std::size_t i = 0; i < len; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            n.value(i, j) = (*a)(start + i, j);
      }
      break;
    }
    case Op::kConcat: {
      if (a->rank() == 1) {
        const std::size_t na = a->dim(0), nb = b->dim(0);
        if (n.value.rank() != 1 || n.value.dim(0) != na + nb)
          n.value = Tensor({na + nb});
        for (std::size_t i = 0; i < na; ++i) n.value(i) = (*a)(i);
        for (std::size_t i = 0; i < nb; ++i) n.value(na + i) = (*b)(i);
      } else {
        const std::size_t cols = a->dim(1);
        const std::size_t ra = a->dim(0), rb = b->dim(0);
        if (n.value.rank() != 2 || n.value.dim(0) != ra + rb)
          n.value = Tensor({ra + rb, cols});
        for (std::size_t i = 0; i < ra; ++i)
          for (std::size_t j = 0; j < cols; ++j) n.value(i, j) = (*a)(i, j);
        for (std::size_t i = 0; i < rb; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            n.value(ra + i, j) = (*b)(i, j);
      }
      break;
    }
    case Op::kReshape: {
      n.value = Tensor(n.shape_attr, std::vector<double>(a->buffer()));
      break;
    }
    case Op::kTranspose:
      n.value = transposed(*a);
      break;
    case Op::kBroadcastAdd: {
      const std::size_t r = a->dim(0), c = a->dim(1);
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          n.value(i, j) = (*a)(i, j) + (*b)(j);
      break;
    }
    case Op::kScale: {
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i)
        n.value[i] = n.c0 * (*a)[i];
      break;
    }
    case Op::kShift: {
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i)
        n.value[i] = (*a)[i] + n.c0;
      break;
    }
    case Op::kClamp: {
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i)
        n.value[i] = std::min(std::max((*a)[i], n.c0), n.c1);
      break;
    }
    case Op::kReverse: {
      const std::size_t d = a->dim(0);
      if (!n.value.same_shape(*a)) n.value = Tensor(a->shape());
      for (std::size_t i = 0; i < d; ++i) n.value(i) = (*a)(d - 1 - i);
      break;
    }
  }
}

void Tape::recompute() {
  for (auto& n : nodes_) {
    if (n.op != Op::kLeaf) eval_node(n);
  }
}

void Tape::backward(Var out) {
  if (out.tape() != this) throw Error("tape: output belongs to another tape");
  if (!nodes_[out.id()].value.is_scalar()) {
    throw ShapeError("backward: output node " + std::to_string(out.id()) +
                     " is not scalar, shape " +
                     nodes_[out.id()].value.shape_str());
  }
  for (auto& n : nodes_) n.grad = Tensor::zeros(n.value.shape());
  nodes_[out.id()].grad = Tensor::scalar(1.0);
  for (int id = out.id(); id >= 0; --id) backprop_node(id);
  grads_ready_ = true;
}

void Tape::backprop_node(int id) {
  Node& n = nodes_[id];
  if (n.op == Op::kLeaf) return;
  const Tensor& g = n.grad;
  Tensor* ga = n.in0 >= 0 ? &nodes_[n.in0].grad : nullptr;
  Tensor* gb = n.in1 >= 0 ? &nodes_[n.in1].grad : nullptr;
  const Tensor* a = n.in0 >= 0 ? &nodes_[n.in0].value : nullptr;
  const Tensor* b = n.in1 >= 0 ? &nodes_[n.in1].value : nullptr;
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
    case Op::kSub: {
      const double sign_b = n.op == Op::kAdd ? 1.0 : -1.0;
      const BinMode mode = bin_mode(*a, *b, n.op, id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        (*ga)[mode == BinMode::kScalarLeft ? 0 : i] += g[i];
        (*gb)[mode == BinMode::kScalarRight ? 0 : i] += sign_b * g[i];
      }
      break;
    }
    case Op::kMul: {
      const BinMode mode = bin_mode(*a, *b, n.op, id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = mode == BinMode::kScalarLeft ? 0 : i;
        const std::size_t ib = mode == BinMode::kScalarRight ? 0 : i;
        (*ga)[ia] += g[i] * (*b)[ib];
        (*gb)[ib] += g[i] * (*a)[ia];
      }
      break;
    }
    case Op::kNeg:
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] -= g[i];
      break;
    case Op::kMatmul: {
      const std::size_t m = a->dim(0), k = a->dim(1);
      if (b->rank() == 1) {
        // y(m) = A(m,k) x(k)
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            (*ga)(i, j) += g(i) * (*b)(j);
            (*gb)(j) += (*a)(i, j) * g(i);
          }
        }
      } else {
        const std::size_t c = b->dim(1);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += g(i, j) * (*b)(p, j);
            (*ga)(i, p) += acc;
          }
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += (*a)(i, p) * g(i, j);
            (*gb)(p, j) += acc;
          }
      }
      break;
    }
    case Op::kExp:
      for (std::size_t i = 0; i < g.size(); ++i)
        (*ga)[i] += g[i] * n.value[i];
      break;
    case Op::kLog:
      for (std::size_t i = 0; i < g.size(); ++i) {
        if ((*a)[i] >= kLogClampMin) (*ga)[i] += g[i] / (*a)[i];
      }
      break;
    case Op::kSigmoid:
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = n.value[i];
        (*ga)[i] += g[i] * s * (1.0 - s);
      }
      break;
    case Op::kTanh: {
      const double corrupt = detail::backward_corruption();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double t = n.value[i];
        (*ga)[i] += corrupt * g[i] * (1.0 - t * t);
      }
      break;
    }
    case Op::kSoftplus:
      for (std::size_t i = 0; i < g.size(); ++i)
        (*ga)[i] += g[i] * stable_sigmoid((*a)[i]);
      break;
    case Op::kSum:
      for (std::size_t i = 0; i < a->size(); ++i) (*ga)[i] += g[0];
      break;
    case Op::kMean: {
      const double inv =
          1.0 / static_cast<double>(std::max<std::size_t>(a->size(), 1));
      for (std::size_t i = 0; i < a->size(); ++i) (*ga)[i] += g[0] * inv;
      break;
    }
    case Op::kSlice: {
      const auto start = static_cast<std::size_t>(n.i0);
      const auto len = static_cast<std::size_t>(n.i1);
      if (a->rank() == 1) {
        for (std::size_t i = 0; i < len; ++i) (*ga)(start + i) += g(i);
      } else {
        const std::size_t cols = a->dim(1);
        for (std::size_t i = 0; i < len; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            (*ga)(start + i, j) += g(i, j);
      }
      break;
    }
    case Op::kConcat: {
      if (a->rank() == 1) {
        const std::size_t na = a->dim(0), nb = b->dim(0);
        for (std::size_t i = 0; i < na; ++i) (*ga)(i) += g(i);
        for (std::size_t i = 0; i < nb; ++i) (*gb)(i) += g(na + i);
      } else {
        const std::size_t cols = a->dim(1);
        for (std::size_t i = 0; i < a->dim(0); ++i)
          for (std::size_t j = 0; j < cols; ++j) (*ga)(i, j) += g(i, j);
        for (std::size_t i = 0; i < b->dim(0); ++i)
          for (std::size_t j = 0; j < cols; ++j)
            (*gb)(i, j) += g(a->dim(0) + i, j);
      }
      break;
    }
    case Op::kReshape:
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      break;
    case Op::kTranspose:
      for (std::size_t i = 0; i < a->dim(0); ++i)
        for (std::size_t j = 0; j < a->dim(1); ++j) (*ga)(i, j) += g(j, i);
      break;
    case Op::kBroadcastAdd: {
      const std::size_t r = a->dim(0), c = a->dim(1);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          (*ga)(i, j) += g(i, j);
          (*gb)(j) += g(i, j);
        }
      break;
    }
    case Op::kScale:
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += n.c0 * g[i];
      break;
    case Op::kShift:
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      break;
    case Op::kClamp:
      for (std::size_t i = 0; i < g.size(); ++i) {
        if ((*a)[i] >= n.c0 && (*a)[i] <= n.c1) (*ga)[i] += g[i];
      }
      break;
    case Op::kReverse: {
      const std::size_t d = a->dim(0);
      for (std::size_t i = 0; i < d; ++i) (*ga)(d - 1 - i) += g(i);
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// op constructors

Var make_node(Tape& tape, Op op, int in0, int in1, double c0, double c1,
              std::int64_t i0, std::int64_t i1,
              std::vector<std::size_t> shape_attr) {
  Tape::Node n;
  n.op = op;
  n.in0 = in0;
  n.in1 = in1;
  n.c0 = c0;
  n.c1 = c1;
  n.i0 = i0;
  n.i1 = i1;
  n.shape_attr = std::move(shape_attr);
  tape.eval_node(n);
  return Var(&tape, tape.add_node(std::move(n)));
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape())
    throw Error("tape: operands belong to different tapes");
  return *a.tape();
}

Var binary(Op op, Var a, Var b) {
  Tape& t = same_tape(a, b);
  const int id = static_cast<int>(t.node_count());
  bin_mode(a.value(), b.value(), op, id);  // validate
  return make_node(t, op, a.id(), b.id(), 0, 0, 0, 0, {});
}

Var unary(Op op, Var a) {
  return make_node(*a.tape(), op, a.id(), -1, 0, 0, 0, 0, {});
}

}  // namespace

Var operator+(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var operator-(Var a, Var b) { return binary(Op::kSub, a, b); }
Var operator*(Var a, Var b) { return binary(Op::kMul, a, b); }
Var operator-(Var a) { return unary(Op::kNeg, a); }
Var vexp(Var a) { return unary(Op::kExp, a); }
Var vlog(Var a) { return unary(Op::kLog, a); }
Var sigmoid(Var a) { return unary(Op::kSigmoid, a); }
Var vtanh(Var a) { return unary(Op::kTanh, a); }
Var softplus(Var a) { return unary(Op::kSoftplus, a); }
Var sum(Var a) { return unary(Op::kSum, a); }
Var mean(Var a) { return unary(Op::kMean, a); }

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const int id = static_cast<int>(t.node_count());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || (bv.rank() != 1 && bv.rank() != 2) ||
      av.dim(1) != bv.dim(0)) {
    shape_fail(Op::kMatmul, id,
               "shapes " + av.shape_str() + " x " + bv.shape_str());
  }
  return make_node(t, Op::kMatmul, a.id(), b.id(), 0, 0, 0, 0, {});
}

Var slice(Var a, std::size_t start, std::size_t len) {
  Tape& t = *a.tape();
  const int id = static_cast<int>(t.node_count());
  const Tensor& av = a.value();
  if (av.rank() < 1 || av.rank() > 2 || start + len > av.dim(0)) {
    shape_fail(Op::kSlice, id,
               "range [" + std::to_string(start) + "," +
                   std::to_string(start + len) + ") out of " + av.shape_str());
  }
  return make_node(t, Op::kSlice, a.id(), -1, 0, 0,
                   static_cast<std::int64_t>(start),
                   static_cast<std::int64_t>(len), {});
}

Var concat(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const int id = static_cast<int>(t.node_count());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool ok = (av.rank() == 1 && bv.rank() == 1) ||
                  (av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1));
  if (!ok) {
    shape_fail(Op::kConcat, id,
               "shapes " + av.shape_str() + " and " + bv.shape_str());
  }
  return make_node(t, Op::kConcat, a.id(), b.id(), 0, 0, 0, 0, {});
}

Var reshape(Var a, std::vector<std::size_t> shape) {
  Tape& t = *a.tape();
  const int id = static_cast<int>(t.node_count());
  if (shape_numel(shape) != a.value().size()) {
    shape_fail(Op::kReshape, id,
               "cannot reshape " + a.value().shape_str() + " to " +
                   Tensor::zeros(shape).shape_str());
  }
  return make_node(t, Op::kReshape, a.id(), -1, 0, 0, 0, 0, std::move(shape));
}

Var transpose(Var a) {
  Tape& t = *a.tape();
  const int id = static_cast<int>(t.node_count());
  if (a.value().rank() != 2) {
    shape_fail(Op::kTranspose, id, "expected a matrix, got " +
                                        a.value().shape_str());
  }
  return make_node(t, Op::kTranspose, a.id(), -1, 0, 0, 0, 0, {});
}

Var broadcast_add(Var m, Var v) {
  Tape& t = same_tape(m, v);
  const int id = static_cast<int>(t.node_count());
  if (m.value().rank() != 2 || v.value().rank() != 1 ||
      m.value().dim(1) != v.value().dim(0)) {
    shape_fail(Op::kBroadcastAdd, id,
               "shapes " + m.value().shape_str() + " and " +
                   v.value().shape_str());
  }
  return make_node(t, Op::kBroadcastAdd, m.id(), v.id(), 0, 0, 0, 0, {});
}

Var scale(Var a, double c) {
  return make_node(*a.tape(), Op::kScale, a.id(), -1, c, 0, 0, 0, {});
}

Var shift(Var a, double c) {
  return make_node(*a.tape(), Op::kShift, a.id(), -1, c, 0, 0, 0, {});
}

Var clamp(Var a, double lo, double hi) {
  return make_node(*a.tape(), Op::kClamp, a.id(), -1, lo, hi, 0, 0, {});
}

Var reverse(Var a) {
  Tape& t = *a.tape();
  const int id = static_cast<int>(t.node_count());
  if (a.value().rank() != 1) {
    shape_fail(Op::kReverse, id, "expected a vector, got " +
                                      a.value().shape_str());
  }
  return make_node(t, Op::kReverse, a.id(), -1, 0, 0, 0, 0, {});
}

Var dot(Var a, Var b) { return sum(a * b); }

// ---------------------------------------------------------------------------

double grad_check(const std::function<Var(Tape&)>& build_loss,
                  std::span<Tensor* const> params, double fd_step) {
  Tape tape;
  Var loss = build_loss(tape);
  if (!loss.value().is_scalar())
    throw ShapeError("grad_check: loss is not scalar");
  if (!std::isfinite(loss.value()()))
    throw NumericError("grad_check: loss is not finite");
  tape.backward(loss);

  double max_rel = 0.0;
  for (Tensor* p : params) {
    const Tensor autodiff = tape.grad_for(*p);
    Tensor& leaf = tape.leaf_value(*p);
    for (std::size_t i = 0; i < leaf.size(); ++i) {
      const double orig = leaf[i];
      leaf[i] = orig + fd_step;
      tape.recompute();
      const double up = loss.value()();
      leaf[i] = orig - fd_step;
      tape.recompute();
      const double down = loss.value()();
      leaf[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("grad_check: perturbed loss is not finite");
      const double fd = (up - down) / (2.0 * fd_step);
      const double rel =
          std::abs(autodiff[i] - fd) / std::max(1.0, std::abs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  tape.recompute();
  return max_rel;
}

}  // namespace latentflow

#include "sswm/numkit/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace sswm::numkit {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Bcast {
  Shape out;
  std::vector<int64_t> sa, sb;  // per-out-dim strides into a and b (0 where broadcast)
};

Bcast make_bcast(const Shape& a, const Shape& b, const char* op) {
  const size_t rank = std::max(a.size(), b.size());
  Bcast plan;
  plan.out.resize(rank);
  plan.sa.resize(rank);
  plan.sb.resize(rank);
  // natural strides, right-aligned
  std::vector<int64_t> na(rank, 0), nb(rank, 0), da(rank, 1), db(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    da[i] = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    db[i] = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
  }
  int64_t stra = 1, strb = 1;
  for (size_t i = rank; i-- > 0;) {
    na[i] = stra;
    nb[i] = strb;
    stra *= da[i];
    strb *= db[i];
  }
  for (size_t i = 0; i < rank; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
      fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
           " are not broadcastable");
    plan.out[i] = std::max(da[i], db[i]);
    plan.sa[i] = da[i] == 1 ? 0 : na[i];
    plan.sb[i] = db[i] == 1 ? 0 : nb[i];
  }
  return plan;
}

template <typename T, typename F>
void apply_bcast(const Bcast& plan, std::span<const T> a, std::span<const T> b, std::span<T> out,
                 F f) {
  const size_t rank = plan.out.size();
  if (rank == 0) {
    out[0] = f(a[0], b[0]);
    return;
  }
  std::vector<int64_t> idx(rank, 0);
  int64_t oa = 0, ob = 0;
  const int64_t n = shape_numel(plan.out);
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = f(a[static_cast<size_t>(oa)], b[static_cast<size_t>(ob)]);
    for (size_t r = rank; r-- > 0;) {
      ++idx[r];
      oa += plan.sa[r];
      ob += plan.sb[r];
      if (idx[r] < plan.out[r]) break;
      idx[r] = 0;
      oa -= plan.sa[r] * plan.out[r];
      ob -= plan.sb[r] * plan.out[r];
    }
  }
}

template <typename F>
Tensor bcast_binary(const Tensor& a, const Tensor& b, const char* op, F f) {
  if (a.dtype() != b.dtype())
    fail(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
         dtype_name(b.dtype()) + ")");
  if (shapes_equal(a.shape(), b.shape())) {
    Tensor out(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pa = a.data<T>();
      auto pb = b.data<T>();
      auto po = out.data<T>();
      for (size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i], pb[i]);
    });
    return out;
  }
  Bcast plan = make_bcast(a.shape(), b.shape(), op);
  Tensor out(plan.out, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    apply_bcast<T>(plan, a.data<T>(), b.data<T>(), out.data<T>(),
                   [&](T x, T y) { return static_cast<T>(f(x, y)); });
  });
  return out;
}

// Sums g down to `target` shape (inverse of broadcasting).
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (shapes_equal(g.shape(), target)) return g;
  const size_t rank = g.rank();
  Shape padded(rank, 1);
  for (size_t i = 0; i < target.size(); ++i) padded[rank - target.size() + i] = target[i];
  std::vector<int64_t> tstride(rank, 0);
  int64_t s = 1;
  for (size_t i = rank; i-- > 0;) {
    tstride[i] = padded[i] == 1 ? 0 : s;
    s *= padded[i];
  }
  Tensor out(target, g.dtype());
  dispatch(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pg = g.data<T>();
    auto po = out.data<T>();
    std::vector<int64_t> idx(rank, 0);
    int64_t off = 0;
    for (int64_t i = 0; i < g.numel(); ++i) {
      po[static_cast<size_t>(off)] += pg[static_cast<size_t>(i)];
      for (size_t r = rank; r-- > 0;) {
        ++idx[r];
        off += tstride[r];
        if (idx[r] < g.shape()[r]) break;
        idx[r] = 0;
        off -= tstride[r] * g.shape()[r];
      }
    }
  });
  return out;
}

template <typename FwdF>
Tensor unary_map(const Tensor& a, FwdF f) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto po = out.data<T>();
    for (size_t i = 0; i < po.size(); ++i) po[i] = static_cast<T>(f(static_cast<double>(pa[i])));
  });
  return out;
}

double sigmoid_stable(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_stable(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

int64_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) fail(std::string(op) + ": requires rank >= 1, got scalar");
  return t.shape().back();
}

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2)
    fail("matmul: requires a rank>=2 and b rank==2, got " + shape_str(a.shape()) + " x " +
         shape_str(b.shape()));
  const int64_t k = a.shape().back();
  if (k != b.shape()[0])
    fail("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
         shape_str(b.shape()));
  if (a.dtype() != b.dtype()) fail("matmul: dtype mismatch");
  const int64_t rows = a.numel() / k;
  const int64_t n = b.shape()[1];
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out(out_shape, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Eigen::Map<const MatRM<T>> ma(a.data<T>().data(), rows, k);
    Eigen::Map<const MatRM<T>> mb(b.data<T>().data(), k, n);
    Eigen::Map<MatRM<T>> mo(out.data<T>().data(), rows, n);
    mo.noalias() = ma * mb;
  });
  return out;
}

}  // namespace

ParamId ParamStore::add(std::string name, Tensor init) {
  for (const auto& e : entries_)
    if (e.name == name) fail("param store: duplicate name '" + name + "'");
  entries_.push_back({std::move(name), std::move(init)});
  return static_cast<ParamId>(entries_.size() - 1);
}

ParamId ParamStore::find(const std::string& name) const {
  for (size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return static_cast<ParamId>(i);
  return -1;
}

double GradRecord::sq_norm() const {
  double s = 0.0;
  for (const auto& g : grads)
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (T v : g.data<T>()) s += static_cast<double>(v) * static_cast<double>(v);
    });
  return s;
}

Var Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor t) {
  Node n;
  n.kind = OpKind::Constant;
  n.value = std::move(t);
  return push(std::move(n));
}

Var Graph::constant_like(double value, Var ref) {
  return constant(Tensor::scalar(value, dtype(ref)));
}

Var Graph::param(const ParamStore& store, ParamId id) {
  Node n;
  n.kind = OpKind::Param;
  n.value = store.value(id);
  n.store = &store;
  n.pid = id;
  return push(std::move(n));
}

Var Graph::reshape(Var a, Shape shape) {
  Node n;
  n.kind = OpKind::Reshape;
  n.inputs = {a.id};
  n.saved_shape = value(a).shape();
  n.value = value(a).reshaped(std::move(shape));
  return push(std::move(n));
}

Var Graph::transpose2d(Var a) {
  const Tensor& t = value(a);
  if (t.rank() != 2) fail("transpose2d: requires rank 2, got " + shape_str(t.shape()));
  const int64_t m = t.shape()[0], k = t.shape()[1];
  Node n;
  n.kind = OpKind::Transpose2d;
  n.inputs = {a.id};
  n.value = Tensor({k, m}, t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = t.data<T>();
    auto dst = n.value.data<T>();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < k; ++j) dst[static_cast<size_t>(j * m + i)] = src[static_cast<size_t>(i * k + j)];
  });
  return push(std::move(n));
}

Var Graph::concat(std::span<const Var> parts, int64_t axis) {
  if (parts.empty()) fail("concat: no inputs");
  const Tensor& first = value(parts[0]);
  const size_t rank = first.rank();
  if (axis < 0) axis += static_cast<int64_t>(rank);
  if (axis < 0 || axis >= static_cast<int64_t>(rank)) fail("concat: axis out of range");
  Shape out_shape = first.shape();
  int64_t total = 0;
  for (Var p : parts) {
    const Tensor& t = value(p);
    if (t.rank() != rank || t.dtype() != first.dtype())
      fail("concat: incompatible input " + shape_str(t.shape()) + " vs " +
           shape_str(first.shape()));
    for (size_t d = 0; d < rank; ++d)
      if (static_cast<int64_t>(d) != axis && t.shape()[d] != first.shape()[d])
        fail("concat: incompatible input " + shape_str(t.shape()) + " vs " +
             shape_str(first.shape()));
    total += t.shape()[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = total;

  Node n;
  n.kind = OpKind::Concat;
  n.i0 = axis;
  for (Var p : parts) n.inputs.push_back(p.id);
  n.value = Tensor(out_shape, first.dtype());
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < rank; ++d) inner *= out_shape[d];
  dispatch(first.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto dst = n.value.data<T>();
    int64_t col_off = 0;
    for (Var p : parts) {
      const Tensor& t = value(p);
      auto src = t.data<T>();
      const int64_t cols = t.shape()[static_cast<size_t>(axis)] * inner;
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(dst.data() + o * total * inner + col_off, src.data() + o * cols,
                    static_cast<size_t>(cols) * sizeof(T));
      col_off += cols;
    }
  });
  return push(std::move(n));
}

Var Graph::slice(Var a, int64_t axis, int64_t start, int64_t len) {
  const Tensor& t = value(a);
  const size_t rank = t.rank();
  if (axis < 0) axis += static_cast<int64_t>(rank);
  if (axis < 0 || axis >= static_cast<int64_t>(rank)) fail("slice: axis out of range");
  const int64_t dim = t.shape()[static_cast<size_t>(axis)];
  if (start < 0 || len < 0 || start + len > dim)
    fail("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
         ") out of bounds for axis of size " + std::to_string(dim));
  Shape out_shape = t.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Node n;
  n.kind = OpKind::Slice;
  n.inputs = {a.id};
  n.i0 = axis;
  n.i1 = start;
  n.i2 = len;
  n.value = Tensor(out_shape, t.dtype());
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= t.shape()[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < rank; ++d) inner *= t.shape()[d];
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = t.data<T>();
    auto dst = n.value.data<T>();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(dst.data() + o * len * inner, src.data() + (o * dim + start) * inner,
                  static_cast<size_t>(len * inner) * sizeof(T));
  });
  return push(std::move(n));
}

Var Graph::unary(OpKind kind, Var a) {
  const Tensor& t = value(a);
  Node n;
  n.kind = kind;
  n.inputs = {a.id};
  switch (kind) {
    case OpKind::Neg:
      n.value = unary_map(t, [](double x) { return -x; });
      break;
    case OpKind::Exp:
      n.value = unary_map(t, [](double x) { return std::exp(x); });
      break;
    case OpKind::Log:
      n.value = unary_map(t, [](double x) { return std::log(x); });
      break;
    case OpKind::Tanh:
      n.value = unary_map(t, [](double x) { return std::tanh(x); });
      break;
    case OpKind::Sigmoid:
      n.value = unary_map(t, sigmoid_stable);
      break;
    case OpKind::Silu:
      n.value = unary_map(t, [](double x) { return x * sigmoid_stable(x); });
      break;
    case OpKind::Gelu:
      n.value = unary_map(t, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
      break;
    case OpKind::Softplus:
      n.value = unary_map(t, softplus_stable);
      break;
    case OpKind::StopGrad:
      n.value = t;
      break;
    default:
      fail("unary: bad kind");
  }
  return push(std::move(n));
}

Var Graph::neg(Var a) { return unary(OpKind::Neg, a); }
Var Graph::exp(Var a) { return unary(OpKind::Exp, a); }
Var Graph::log(Var a) { return unary(OpKind::Log, a); }
Var Graph::tanh(Var a) { return unary(OpKind::Tanh, a); }
Var Graph::sigmoid(Var a) { return unary(OpKind::Sigmoid, a); }
Var Graph::silu(Var a) { return unary(OpKind::Silu, a); }
Var Graph::gelu(Var a) { return unary(OpKind::Gelu, a); }
Var Graph::softplus(Var a) { return unary(OpKind::Softplus, a); }
Var Graph::stop_grad(Var a) { return unary(OpKind::StopGrad, a); }

Var Graph::binary(OpKind kind, Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  Node n;
  n.kind = kind;
  n.inputs = {a.id, b.id};
  switch (kind) {
    case OpKind::Add:
      n.value = bcast_binary(ta, tb, "add", [](double x, double y) { return x + y; });
      break;
    case OpKind::Sub:
      n.value = bcast_binary(ta, tb, "sub", [](double x, double y) { return x - y; });
      break;
    case OpKind::Mul:
      n.value = bcast_binary(ta, tb, "mul", [](double x, double y) { return x * y; });
      break;
    case OpKind::Div:
      n.value = bcast_binary(ta, tb, "div", [](double x, double y) { return x / y; });
      break;
    default:
      fail("binary: bad kind");
  }
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) { return binary(OpKind::Add, a, b); }
Var Graph::sub(Var a, Var b) { return binary(OpKind::Sub, a, b); }
Var Graph::mul(Var a, Var b) { return binary(OpKind::Mul, a, b); }
Var Graph::div(Var a, Var b) { return binary(OpKind::Div, a, b); }

Var Graph::matmul(Var a, Var b) {
  Node n;
  n.kind = OpKind::Matmul;
  n.inputs = {a.id, b.id};
  n.value = matmul_values(value(a), value(b));
  return push(std::move(n));
}

Var Graph::sum(Var a) {
  const Tensor& t = value(a);
  Node n;
  n.kind = OpKind::SumAll;
  n.inputs = {a.id};
  double s = 0.0;
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : t.data<T>()) s += static_cast<double>(v);
  });
  n.value = Tensor::scalar(s, t.dtype());
  return push(std::move(n));
}

Var Graph::sum_axis(Var a, int64_t axis) {
  const Tensor& t = value(a);
  const size_t rank = t.rank();
  if (axis < 0) axis += static_cast<int64_t>(rank);
  if (axis < 0 || axis >= static_cast<int64_t>(rank)) fail("sum_axis: axis out of range");
  Shape out_shape = t.shape();
  const int64_t dim = out_shape[static_cast<size_t>(axis)];
  out_shape[static_cast<size_t>(axis)] = 1;
  Node n;
  n.kind = OpKind::SumAxis;
  n.inputs = {a.id};
  n.i0 = axis;
  n.value = Tensor(out_shape, t.dtype());
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= t.shape()[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < rank; ++d) inner *= t.shape()[d];
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = t.data<T>();
    auto dst = n.value.data<T>();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t k = 0; k < dim; ++k)
        for (int64_t i = 0; i < inner; ++i)
          dst[static_cast<size_t>(o * inner + i)] += src[static_cast<size_t>((o * dim + k) * inner + i)];
  });
  return push(std::move(n));
}

Var Graph::mean(Var a) {
  const Tensor& t = value(a);
  if (t.numel() == 0) fail("mean: empty tensor");
  Node n;
  n.kind = OpKind::MeanAll;
  n.inputs = {a.id};
  double s = 0.0;
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : t.data<T>()) s += static_cast<double>(v);
  });
  n.value = Tensor::scalar(s / static_cast<double>(t.numel()), t.dtype());
  return push(std::move(n));
}

Var Graph::softmax(Var a) {
  const Tensor& t = value(a);
  const int64_t cols = last_dim(t, "softmax");
  const int64_t rows = t.numel() / cols;
  Node n;
  n.kind = OpKind::Softmax;
  n.inputs = {a.id};
  n.value = Tensor(t.shape(), t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = t.data<T>();
    auto dst = n.value.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* x = src.data() + r * cols;
      T* y = dst.data() + r * cols;
      T m = x[0];
      for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
      double s = 0.0;
      for (int64_t c = 0; c < cols; ++c) {
        y[c] = static_cast<T>(std::exp(static_cast<double>(x[c] - m)));
        s += static_cast<double>(y[c]);
      }
      for (int64_t c = 0; c < cols; ++c) y[c] = static_cast<T>(static_cast<double>(y[c]) / s);
    }
  });
  return push(std::move(n));
}

Var Graph::log_softmax(Var a) {
  const Tensor& t = value(a);
  const int64_t cols = last_dim(t, "log_softmax");
  const int64_t rows = t.numel() / cols;
  Node n;
  n.kind = OpKind::LogSoftmax;
  n.inputs = {a.id};
  n.value = Tensor(t.shape(), t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = t.data<T>();
    auto dst = n.value.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* x = src.data() + r * cols;
      T* y = dst.data() + r * cols;
      T m = x[0];
      for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
      double s = 0.0;
      for (int64_t c = 0; c < cols; ++c) s += std::exp(static_cast<double>(x[c] - m));
      const double lse = static_cast<double>(m) + std::log(s);
      for (int64_t c = 0; c < cols; ++c) y[c] = static_cast<T>(static_cast<double>(x[c]) - lse);
    }
  });
  return push(std::move(n));
}

Var Graph::layer_norm(Var a, double eps) {
  const Tensor& t = value(a);
  const int64_t cols = last_dim(t, "layer_norm");
  const int64_t rows = t.numel() / cols;
  Node n;
  n.kind = OpKind::LayerNorm;
  n.inputs = {a.id};
  n.f0 = eps;
  n.value = Tensor(t.shape(), t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = t.data<T>();
    auto dst = n.value.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* x = src.data() + r * cols;
      T* y = dst.data() + r * cols;
      double mu = 0.0;
      for (int64_t c = 0; c < cols; ++c) mu += static_cast<double>(x[c]);
      mu /= static_cast<double>(cols);
      double var = 0.0;
      for (int64_t c = 0; c < cols; ++c) {
        const double d = static_cast<double>(x[c]) - mu;
        var += d * d;
      }
      var /= static_cast<double>(cols);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int64_t c = 0; c < cols; ++c)
        y[c] = static_cast<T>((static_cast<double>(x[c]) - mu) * inv);
    }
  });
  return push(std::move(n));
}

Var Graph::clamp_min(Var a, double lo) {
  const Tensor& t = value(a);
  Node n;
  n.kind = OpKind::ClampMin;
  n.inputs = {a.id};
  n.f0 = lo;
  n.value = unary_map(t, [&](double x) { return std::max(x, lo); });
  return push(std::move(n));
}

Var Graph::custom(std::shared_ptr<CustomOp> op, std::span<const Var> inputs) {
  Node n;
  n.kind = OpKind::Custom;
  std::vector<const Tensor*> ins;
  for (Var v : inputs) {
    n.inputs.push_back(v.id);
    ins.push_back(&value(v));
  }
  n.value = op->forward(std::span<const Tensor* const>(ins));
  n.custom_op = std::move(op);
  return push(std::move(n));
}

Var Graph::straight_through(Var probs, Tensor sample) {
  const Tensor& p = value(probs);
  if (!shapes_equal(p.shape(), sample.shape()) || p.dtype() != sample.dtype())
    fail("straight_through: sample " + shape_str(sample.shape()) + " does not match probs " +
         shape_str(p.shape()));
  // Forward value is the sample itself (exact one-hots); backward passes to probs unchanged.
  Node n;
  n.kind = OpKind::Constant;
  n.value = std::move(sample);
  n.inputs = {probs.id};
  n.i0 = 1;  // marks the straight-through variant of Constant
  return push(std::move(n));
}

const Tensor& Graph::value(Var v) const {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) fail("graph: invalid var");
  return nodes_[static_cast<size_t>(v.id)].value;
}

void Graph::accumulate(int32_t id, const Tensor& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!shapes_equal(g.shape(), n.value.shape()))
    fail("backward: gradient shape " + shape_str(g.shape()) + " does not match value " +
         shape_str(n.value.shape()));
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
    return;
  }
  dispatch(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto dst = n.grad.data<T>();
    auto src = g.data<T>();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  });
}

void Graph::backward(Var loss) {
  const Tensor& lv = value(loss);
  if (lv.numel() != 1) fail("backward: loss must be scalar, got " + shape_str(lv.shape()));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  accumulate(loss.id, Tensor::full(lv.shape(), 1.0, lv.dtype()));

  for (int32_t id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.has_grad) continue;
    const Tensor& g = n.grad;
    switch (n.kind) {
      case OpKind::Constant:
        if (n.i0 == 1 && !n.inputs.empty()) accumulate(n.inputs[0], g);  // straight-through
        break;
      case OpKind::Param:
        break;
      case OpKind::StopGrad:
        break;
      case OpKind::Reshape:
        accumulate(n.inputs[0], g.reshaped(n.saved_shape));
        break;
      case OpKind::Transpose2d: {
        const int64_t m = n.value.shape()[0], k = n.value.shape()[1];
        Tensor gt({k, m}, g.dtype());
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto src = g.data<T>();
          auto dst = gt.data<T>();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < k; ++j)
              dst[static_cast<size_t>(j * m + i)] = src[static_cast<size_t>(i * k + j)];
        });
        accumulate(n.inputs[0], gt);
        break;
      }
      case OpKind::Concat: {
        const int64_t axis = n.i0;
        const Shape& os = n.value.shape();
        const int64_t total = os[static_cast<size_t>(axis)];
        int64_t outer = 1, inner = 1;
        for (int64_t d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
        for (size_t d = static_cast<size_t>(axis) + 1; d < os.size(); ++d) inner *= os[d];
        int64_t off = 0;
        for (int32_t in_id : n.inputs) {
          const Tensor& tin = nodes_[static_cast<size_t>(in_id)].value;
          const int64_t len = tin.shape()[static_cast<size_t>(axis)];
          Tensor part(tin.shape(), g.dtype());
          dispatch(g.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto src = g.data<T>();
            auto dst = part.data<T>();
            for (int64_t o = 0; o < outer; ++o)
              std::memcpy(dst.data() + o * len * inner, src.data() + (o * total + off) * inner,
                          static_cast<size_t>(len * inner) * sizeof(T));
          });
          accumulate(in_id, part);
          off += len;
        }
        break;
      }
      case OpKind::Slice: {
        const Tensor& tin = nodes_[static_cast<size_t>(n.inputs[0])].value;
        Tensor gi(tin.shape(), g.dtype());
        const int64_t axis = n.i0, start = n.i1, len = n.i2;
        const int64_t dim = tin.shape()[static_cast<size_t>(axis)];
        int64_t outer = 1, inner = 1;
        for (int64_t d = 0; d < axis; ++d) outer *= tin.shape()[static_cast<size_t>(d)];
        for (size_t d = static_cast<size_t>(axis) + 1; d < tin.rank(); ++d) inner *= tin.shape()[d];
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto src = g.data<T>();
          auto dst = gi.data<T>();
          for (int64_t o = 0; o < outer; ++o)
            std::memcpy(dst.data() + (o * dim + start) * inner, src.data() + o * len * inner,
                        static_cast<size_t>(len * inner) * sizeof(T));
        });
        accumulate(n.inputs[0], gi);
        break;
      }
      case OpKind::Neg:
        accumulate(n.inputs[0], unary_map(g, [](double x) { return -x; }));
        break;
      case OpKind::Exp:
        accumulate(n.inputs[0],
                   bcast_binary(g, n.value, "exp_bwd", [](double gv, double y) { return gv * y; }));
        break;
      case OpKind::Log: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        accumulate(n.inputs[0],
                   bcast_binary(g, x, "log_bwd", [](double gv, double xv) { return gv / xv; }));
        break;
      }
      case OpKind::Tanh:
        accumulate(n.inputs[0], bcast_binary(g, n.value, "tanh_bwd",
                                             [](double gv, double y) { return gv * (1.0 - y * y); }));
        break;
      case OpKind::Sigmoid:
        accumulate(n.inputs[0], bcast_binary(g, n.value, "sigmoid_bwd", [](double gv, double y) {
                     return gv * y * (1.0 - y);
                   }));
        break;
      case OpKind::Silu: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        accumulate(n.inputs[0], bcast_binary(g, x, "silu_bwd", [](double gv, double xv) {
                     const double s = sigmoid_stable(xv);
                     return gv * s * (1.0 + xv * (1.0 - s));
                   }));
        break;
      }
      case OpKind::Gelu: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        accumulate(n.inputs[0], bcast_binary(g, x, "gelu_bwd", [](double gv, double xv) {
                     const double cdf = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
                     const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv * xv);
                     return gv * (cdf + xv * pdf);
                   }));
        break;
      }
      case OpKind::Softplus: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        accumulate(n.inputs[0], bcast_binary(g, x, "softplus_bwd", [](double gv, double xv) {
                     return gv * sigmoid_stable(xv);
                   }));
        break;
      }
      case OpKind::Add: {
        const Shape& sa = nodes_[static_cast<size_t>(n.inputs[0])].value.shape();
        const Shape& sb = nodes_[static_cast<size_t>(n.inputs[1])].value.shape();
        accumulate(n.inputs[0], reduce_to(g, sa));
        accumulate(n.inputs[1], reduce_to(g, sb));
        break;
      }
      case OpKind::Sub: {
        const Shape& sa = nodes_[static_cast<size_t>(n.inputs[0])].value.shape();
        const Shape& sb = nodes_[static_cast<size_t>(n.inputs[1])].value.shape();
        accumulate(n.inputs[0], reduce_to(g, sa));
        accumulate(n.inputs[1],
                   reduce_to(unary_map(g, [](double x) { return -x; }), sb));
        break;
      }
      case OpKind::Mul: {
        const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
        accumulate(n.inputs[0],
                   reduce_to(bcast_binary(g, b, "mul_bwd", [](double x, double y) { return x * y; }),
                             a.shape()));
        accumulate(n.inputs[1],
                   reduce_to(bcast_binary(g, a, "mul_bwd", [](double x, double y) { return x * y; }),
                             b.shape()));
        break;
      }
      case OpKind::Div: {
        const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
        accumulate(n.inputs[0],
                   reduce_to(bcast_binary(g, b, "div_bwd", [](double x, double y) { return x / y; }),
                             a.shape()));
        Tensor gb = bcast_binary(g, n.value, "div_bwd",
                                 [](double gv, double y) { return -gv * y; });  // -g * (a/b)
        accumulate(n.inputs[1],
                   reduce_to(bcast_binary(gb, b, "div_bwd", [](double x, double y) { return x / y; }),
                             b.shape()));
        break;
      }
      case OpKind::Matmul: {
        const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
        const int64_t k = a.shape().back();
        const int64_t rows = a.numel() / k;
        const int64_t m = b.shape()[1];
        Tensor ga(a.shape(), a.dtype());
        Tensor gb(b.shape(), b.dtype());
        dispatch(a.dtype(), [&](auto tag) {
          using T = decltype(tag);
          Eigen::Map<const MatRM<T>> mg(g.data<T>().data(), rows, m);
          Eigen::Map<const MatRM<T>> ma(a.data<T>().data(), rows, k);
          Eigen::Map<const MatRM<T>> mb(b.data<T>().data(), k, m);
          Eigen::Map<MatRM<T>> mga(ga.data<T>().data(), rows, k);
          Eigen::Map<MatRM<T>> mgb(gb.data<T>().data(), k, m);
          mga.noalias() = mg * mb.transpose();
          mgb.noalias() = ma.transpose() * mg;
        });
        accumulate(n.inputs[0], ga);
        accumulate(n.inputs[1], gb);
        break;
      }
      case OpKind::SumAll: {
        const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
        accumulate(n.inputs[0], Tensor::full(a.shape(), g.item(), a.dtype()));
        break;
      }
      case OpKind::MeanAll: {
        const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
        accumulate(n.inputs[0],
                   Tensor::full(a.shape(), g.item() / static_cast<double>(a.numel()), a.dtype()));
        break;
      }
      case OpKind::SumAxis: {
        const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
        Tensor gi(a.shape(), a.dtype());
        const int64_t axis = n.i0;
        const int64_t dim = a.shape()[static_cast<size_t>(axis)];
        int64_t outer = 1, inner = 1;
        for (int64_t d = 0; d < axis; ++d) outer *= a.shape()[static_cast<size_t>(d)];
        for (size_t d = static_cast<size_t>(axis) + 1; d < a.rank(); ++d) inner *= a.shape()[d];
        dispatch(a.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto src = g.data<T>();
          auto dst = gi.data<T>();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t kk = 0; kk < dim; ++kk)
              for (int64_t i = 0; i < inner; ++i)
                dst[static_cast<size_t>((o * dim + kk) * inner + i)] = src[static_cast<size_t>(o * inner + i)];
        });
        accumulate(n.inputs[0], gi);
        break;
      }
      case OpKind::Softmax: {
        const int64_t cols = n.value.shape().back();
        const int64_t rows = n.value.numel() / cols;
        Tensor gi(n.value.shape(), n.value.dtype());
        dispatch(n.value.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto y = n.value.data<T>();
          auto gv = g.data<T>();
          auto dst = gi.data<T>();
          for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int64_t c = 0; c < cols; ++c)
              dot += static_cast<double>(gv[r * cols + c]) * static_cast<double>(y[r * cols + c]);
            for (int64_t c = 0; c < cols; ++c)
              dst[static_cast<size_t>(r * cols + c)] = static_cast<T>(
                  (static_cast<double>(gv[r * cols + c]) - dot) * static_cast<double>(y[r * cols + c]));
          }
        });
        accumulate(n.inputs[0], gi);
        break;
      }
      case OpKind::LogSoftmax: {
        const int64_t cols = n.value.shape().back();
        const int64_t rows = n.value.numel() / cols;
        Tensor gi(n.value.shape(), n.value.dtype());
        dispatch(n.value.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto y = n.value.data<T>();
          auto gv = g.data<T>();
          auto dst = gi.data<T>();
          for (int64_t r = 0; r < rows; ++r) {
            double sg = 0.0;
            for (int64_t c = 0; c < cols; ++c) sg += static_cast<double>(gv[r * cols + c]);
            for (int64_t c = 0; c < cols; ++c)
              dst[static_cast<size_t>(r * cols + c)] = static_cast<T>(
                  static_cast<double>(gv[r * cols + c]) -
                  std::exp(static_cast<double>(y[r * cols + c])) * sg);
          }
        });
        accumulate(n.inputs[0], gi);
        break;
      }
      case OpKind::LayerNorm: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const int64_t cols = x.shape().back();
        const int64_t rows = x.numel() / cols;
        Tensor gi(x.shape(), x.dtype());
        const double eps = n.f0;
        dispatch(x.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto px = x.data<T>();
          auto gv = g.data<T>();
          auto xh = n.value.data<T>();  // normalized values
          auto dst = gi.data<T>();
          for (int64_t r = 0; r < rows; ++r) {
            double mu = 0.0;
            for (int64_t c = 0; c < cols; ++c) mu += static_cast<double>(px[r * cols + c]);
            mu /= static_cast<double>(cols);
            double var = 0.0;
            for (int64_t c = 0; c < cols; ++c) {
              const double d = static_cast<double>(px[r * cols + c]) - mu;
              var += d * d;
            }
            var /= static_cast<double>(cols);
            const double inv = 1.0 / std::sqrt(var + eps);
            double gmean = 0.0, gxmean = 0.0;
            for (int64_t c = 0; c < cols; ++c) {
              gmean += static_cast<double>(gv[r * cols + c]);
              gxmean += static_cast<double>(gv[r * cols + c]) * static_cast<double>(xh[r * cols + c]);
            }
            gmean /= static_cast<double>(cols);
            gxmean /= static_cast<double>(cols);
            for (int64_t c = 0; c < cols; ++c)
              dst[static_cast<size_t>(r * cols + c)] = static_cast<T>(
                  inv * (static_cast<double>(gv[r * cols + c]) - gmean -
                         static_cast<double>(xh[r * cols + c]) * gxmean));
          }
        });
        accumulate(n.inputs[0], gi);
        break;
      }
      case OpKind::ClampMin: {
        const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const double lo = n.f0;
        accumulate(n.inputs[0], bcast_binary(g, x, "clamp_bwd", [&](double gv, double xv) {
                     return xv > lo ? gv : 0.0;
                   }));
        break;
      }
      case OpKind::Custom: {
        std::vector<const Tensor*> ins;
        for (int32_t in_id : n.inputs) ins.push_back(&nodes_[static_cast<size_t>(in_id)].value);
        std::vector<std::optional<Tensor>> gs =
            n.custom_op->backward(std::span<const Tensor* const>(ins), n.value, g);
        if (gs.size() != n.inputs.size())
          fail("custom op '" + n.custom_op->name() + "': backward arity");
        for (size_t i = 0; i < gs.size(); ++i)
          if (gs[i].has_value()) accumulate(n.inputs[i], *gs[i]);
        break;
      }
      default:
        fail("backward: unhandled op");
    }
  }
}

GradRecord Graph::grads_for(const ParamStore& store) const {
  GradRecord rec;
  rec.grads.reserve(store.size());
  for (size_t i = 0; i < store.size(); ++i) {
    const Tensor& v = store.value(static_cast<ParamId>(i));
    rec.grads.push_back(Tensor::zeros(v.shape(), v.dtype()));
  }
  for (const auto& n : nodes_) {
    if (n.kind != OpKind::Param || n.store != &store || !n.has_grad) continue;
    Tensor& dst = rec.grads[static_cast<size_t>(n.pid)];
    dispatch(dst.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto d = dst.data<T>();
      auto s = n.grad.data<T>();
      for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
    });
  }
  return rec;
}

Tensor Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  return Tensor::zeros(n.value.shape(), n.value.dtype());
}

Var forward_op(Graph& g, const std::string& name, std::span<const Var> in, const OpAttrs& attrs) {
  auto want = [&](size_t k) {
    if (in.size() != k)
      fail("forward_op '" + name + "': expected " + std::to_string(k) + " inputs, got " +
           std::to_string(in.size()));
  };
  if (name == "matmul") {
    want(2);
    return g.matmul(in[0], in[1]);
  }
  if (name == "add") {
    want(2);
    return g.add(in[0], in[1]);
  }
  if (name == "mul") {
    want(2);
    return g.mul(in[0], in[1]);
  }
  if (name == "exp") {
    want(1);
    return g.exp(in[0]);
  }
  if (name == "log") {
    want(1);
    return g.log(in[0]);
  }
  if (name == "tanh") {
    want(1);
    return g.tanh(in[0]);
  }
  if (name == "gelu") {
    want(1);
    return g.gelu(in[0]);
  }
  if (name == "sigmoid") {
    want(1);
    return g.sigmoid(in[0]);
  }
  if (name == "softmax") {
    want(1);
    return g.softmax(in[0]);
  }
  if (name == "layernorm") {
    want(1);
    return g.layer_norm(in[0]);
  }
  if (name == "concat") {
    return g.concat(in, attrs.axis);
  }
  if (name == "slice") {
    want(1);
    return g.slice(in[0], attrs.axis, attrs.start, attrs.len);
  }
  if (name == "sum") {
    want(1);
    return g.sum(in[0]);
  }
  if (name == "mean") {
    want(1);
    return g.mean(in[0]);
  }
  if (name == "complex-mul") {
    // (ar, ai, br, bi) -> stacked [2, ...] holding (real, imag)
    want(4);
    Var re = g.sub(g.mul(in[0], in[2]), g.mul(in[1], in[3]));
    Var im = g.add(g.mul(in[0], in[3]), g.mul(in[1], in[2]));
    Shape s = g.shape(re);
    Shape lifted = s;
    lifted.insert(lifted.begin(), 1);
    std::vector<Var> parts = {g.reshape(re, lifted), g.reshape(im, lifted)};
    return g.concat(parts, 0);
  }
  if (name == "take-real") {
    want(1);
    const Shape& s = g.shape(in[0]);
    if (s.empty() || s[0] != 2) fail("take-real: expects a [2, ...] stacked complex tensor");
    Shape rest(s.begin() + 1, s.end());
    return g.reshape(g.slice(in[0], 0, 0, 1), rest);
  }
  fail("forward_op: unknown op '" + name + "'");
}

}  // namespace sswm::numkit

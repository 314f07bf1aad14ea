#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sswm/numkit/tensor.hpp"

namespace sswm::numkit {

using ParamId = int32_t;

// Named trainable parameters. Lives across training steps; graphs are rebuilt per step.
class ParamStore {
 public:
  ParamId add(std::string name, Tensor init);
  Tensor& value(ParamId id) { return entries_[static_cast<size_t>(id)].value; }
  const Tensor& value(ParamId id) const { return entries_[static_cast<size_t>(id)].value; }
  const std::string& name(ParamId id) const { return entries_[static_cast<size_t>(id)].name; }
  size_t size() const { return entries_.size(); }
  ParamId find(const std::string& name) const;  // -1 if absent

 private:
  struct Entry {
    std::string name;
    Tensor value;
  };
  std::vector<Entry> entries_;
};

// Per-parameter gradients, index-aligned with a ParamStore. Unused parameters hold exact zeros.
struct GradRecord {
  std::vector<Tensor> grads;
  double sq_norm() const;
};

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

class Graph;

// Extension point for fused ops (e.g. the sequence scan) that provide their own backward.
class CustomOp {
 public:
  virtual ~CustomOp() = default;
  virtual std::string name() const = 0;
  virtual Tensor forward(std::span<const Tensor* const> inputs) = 0;
  // Returns per-input gradients; nullopt marks a non-differentiable input.
  virtual std::vector<std::optional<Tensor>> backward(std::span<const Tensor* const> inputs,
                                                      const Tensor& value, const Tensor& grad) = 0;
};

enum class OpKind : uint8_t {
  Constant,
  Param,
  Reshape,
  Transpose2d,
  Concat,
  Slice,
  Neg,
  Exp,
  Log,
  Tanh,
  Sigmoid,
  Silu,
  Gelu,
  Softplus,
  Add,
  Sub,
  Mul,
  Div,
  Matmul,
  SumAll,
  SumAxis,
  MeanAll,
  Softmax,
  LogSoftmax,
  LayerNorm,
  ClampMin,
  StopGrad,
  Custom,
};

// Single-owner eager tape: values are computed when ops are recorded, backward replays in
// reverse. Independent graphs may run on different threads; one graph must not be shared.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t);
  Var constant_like(double value, Var ref);
  Var param(const ParamStore& store, ParamId id);

  Var reshape(Var a, Shape shape);
  Var transpose2d(Var a);
  Var concat(std::span<const Var> parts, int64_t axis);
  Var slice(Var a, int64_t axis, int64_t start, int64_t len);

  Var neg(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var silu(Var a);
  Var gelu(Var a);
  Var softplus(Var a);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var matmul(Var a, Var b);

  Var sum(Var a);                     // -> scalar
  Var sum_axis(Var a, int64_t axis);  // keeps the axis with size 1
  Var mean(Var a);                    // -> scalar
  Var softmax(Var a);                 // last axis
  Var log_softmax(Var a);             // last axis
  Var layer_norm(Var a, double eps = 1e-5);  // last axis, no affine
  Var clamp_min(Var a, double lo);
  Var stop_grad(Var a);

  Var custom(std::shared_ptr<CustomOp> op, std::span<const Var> inputs);

  // sample is the forward value; gradients pass to `probs` unchanged.
  Var straight_through(Var probs, Tensor sample);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  Dtype dtype(Var v) const { return value(v).dtype(); }

  // Reverse pass from a scalar loss. Rejects non-scalar losses.
  void backward(Var loss);
  GradRecord grads_for(const ParamStore& store) const;
  // Gradient of the last backward() w.r.t. any node (zeros if none reached it).
  Tensor grad(Var v) const;

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<int32_t> inputs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    int64_t i0 = 0, i1 = 0, i2 = 0;  // axis / start / len
    double f0 = 0.0;                 // eps / clamp bound
    const ParamStore* store = nullptr;
    ParamId pid = -1;
    std::shared_ptr<CustomOp> custom_op;
    Shape saved_shape;  // reshape: input shape
  };

  Var push(Node n);
  Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }
  void accumulate(int32_t id, const Tensor& g);
  Var unary(OpKind kind, Var a);
  Var binary(OpKind kind, Var a, Var b);

  std::deque<Node> nodes_;
};

// Test-facing dispatch by op name over the generic op vocabulary.
struct OpAttrs {
  int64_t axis = -1;
  int64_t start = 0;
  int64_t len = -1;
};
Var forward_op(Graph& g, const std::string& name, std::span<const Var> inputs,
               const OpAttrs& attrs = {});

}  // namespace sswm::numkit

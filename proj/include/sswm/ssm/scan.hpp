#pragma once

#include <memory>
#include <vector>

#include "sswm/numkit/graph.hpp"
#include "sswm/numkit/tensor.hpp"

namespace sswm::ssm {

// One element combined by the reset-aware associative operator: the diagonal
// state-transition part, the input part, and a done flag.
struct ScanElement {
  std::vector<double> a_re, a_im;  // length N
  std::vector<double> b_re, b_im;  // length N
  double done = 0.0;

  static ScanElement identity(int64_t n);
  static ScanElement make(std::vector<double> a_re, std::vector<double> a_im,
                          std::vector<double> b_re, std::vector<double> b_im, double done);
};

// (e_i, e_j) with e_i preceding e_j:
//   ((1-d_i) a_j*a_i + d_i a_j,  (1-d_i) a_j*b_i + b_j,  clip(d_i+d_j, 0, 1))
ScanElement combine(const ScanElement& ei, const ScanElement& ej);

struct ComplexVec {
  std::vector<double> re, im;
};

// Inclusive prefix combine of [init, e_1, ..., e_L]; position n holds the b-part of
// init • e_1 • ... • e_n, i.e. the state x_n. init must be (identity, x_0, 0).
// Executes a Blelloch up/down sweep in O(log L) combine stages. Rejects empty sequences.
std::vector<ComplexVec> parallel_scan(const std::vector<ScanElement>& elements,
                                      const ScanElement& init);

// Array form used by the sequence layers. States x_1..x_T per batch row:
//   x_t = (1 - d_{t-1}) * a_t ∘ x_{t-1} + b_t     (d_0 = 0, x_0 given)
// a may be time-invariant ([N]) or per-element ([B,T,N]); b is [B,T,N]; dones [B,T]
// (done at position t resets the state entering t+1); x0 is [B,N].
// Output packs re/im as [B,T,2,N]. stage_count, when non-null, receives the number
// of combine stages of the sweep.
numkit::Tensor scan_states(const numkit::Tensor& a_re, const numkit::Tensor& a_im,
                           const numkit::Tensor& b_re, const numkit::Tensor& b_im,
                           const numkit::Tensor& dones, const numkit::Tensor& x0_re,
                           const numkit::Tensor& x0_im, int* stage_count = nullptr);

// Differentiable scan over a diagonal recurrence with a time-invariant transition.
// Inputs: (a_re [N], a_im [N], bu_re [B,T,N], bu_im [B,T,N], x0_re [B,N], x0_im [B,N]).
// The done flags are carried by the op (they are {0,1} data, not differentiable).
class DiagScanOp final : public numkit::CustomOp {
 public:
  explicit DiagScanOp(numkit::Tensor dones) : dones_(std::move(dones)) {}

  std::string name() const override { return "diag_scan"; }
  numkit::Tensor forward(std::span<const numkit::Tensor* const> inputs) override;
  std::vector<std::optional<numkit::Tensor>> backward(std::span<const numkit::Tensor* const> inputs,
                                                      const numkit::Tensor& value,
                                                      const numkit::Tensor& grad) override;

  const numkit::Tensor& dones() const { return dones_; }

 private:
  numkit::Tensor dones_;
};

// Graph helper wrapping DiagScanOp; returns (states_re, states_im), each [B,T,N].
struct ScanVars {
  numkit::Var re, im;
};
ScanVars diag_scan(numkit::Graph& g, numkit::Var a_re, numkit::Var a_im, numkit::Var bu_re,
                   numkit::Var bu_im, numkit::Var x0_re, numkit::Var x0_im,
                   const numkit::Tensor& dones);

}  // namespace sswm::ssm

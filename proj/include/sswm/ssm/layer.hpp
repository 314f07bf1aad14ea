#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sswm/numkit/complex.hpp"
#include "sswm/numkit/graph.hpp"
#include "sswm/ssm/hippo.hpp"
#include "sswm/ssm/scan.hpp"

namespace sswm::ssm {

enum class Mode { Parallel, Recurrent };

// Discretized parameters as graph vars (bilinear transform applied to A and B).
struct DiscreteSsmVars {
  numkit::ComplexPair a_bar;  // [N]
  numkit::ComplexPair b_bar;  // [N,H]
  numkit::ComplexPair c;      // [H,N]
  numkit::Var d;              // [H]
};

// Host-side layer state (one batch of per-layer hidden states).
using LayerStateT = std::pair<numkit::Tensor, numkit::Tensor>;  // re, im each [B,N]

struct SsmApplyOut {
  numkit::Var y;               // [B,T,H] raw SSM output 2*Re(Cx) + Du
  numkit::ComplexPair states;  // [B,T,N]
  numkit::ComplexPair last;    // [B,N]
};

// One diagonal MIMO layer followed by the gated transformation and post-norm:
//   v = SSM(u); w = GLU(GeLU(v)); out = LayerNorm(u + w) (affine).
class SsmLayer {
 public:
  SsmLayer(numkit::ParamStore& store, const std::string& prefix, const SsmLayerConfig& cfg,
           uint64_t seed, numkit::Dtype dt);

  // Bilinear transform: a_bar = (1 + d a/2)/(1 - d a/2), b_bar rows scaled by d/(1 - d a/2).
  // Rejects entries where the denominator vanishes, naming the entry index.
  DiscreteSsmVars discretize(numkit::Graph& g) const;

  SsmApplyOut apply_ssm(numkit::Graph& g, const DiscreteSsmVars& disc, numkit::Var u,
                        const numkit::Tensor& is_first, const LayerStateT* x0) const;

  struct Output {
    numkit::Var y;               // [B,T,H] block output
    numkit::ComplexPair states;  // [B,T,N]
    numkit::ComplexPair last;    // [B,N]
  };
  Output forward(numkit::Graph& g, numkit::Var u, const numkit::Tensor& is_first,
                 const LayerStateT* x0) const;

  const SsmLayerConfig& config() const { return cfg_; }
  const ContinuousSsmParams& params() const { return ssm_; }

 private:
  numkit::ParamStore* store_;
  SsmLayerConfig cfg_;
  numkit::Dtype dt_;
  ContinuousSsmParams ssm_;
  numkit::ParamId glu_w1_, glu_b1_, glu_w2_, glu_b2_, glu_wo_, glu_bo_;
  numkit::ParamId ln_scale_, ln_bias_;
};

// Stacked layers; h is the final layer's output, states collect every layer.
class SsmStack {
 public:
  SsmStack(numkit::ParamStore& store, const std::string& prefix, int64_t n_layers,
           const SsmLayerConfig& cfg, uint64_t seed, numkit::Dtype dt);

  struct Output {
    numkit::Var h;                               // [B,T,H]
    std::vector<numkit::ComplexPair> states;     // per layer, [B,T,N]
    std::vector<numkit::ComplexPair> last;       // per layer, [B,N]
  };
  // x0: one state per layer, or empty for the episode-start state.
  // Recurrent mode requires T == 1.
  Output forward(numkit::Graph& g, numkit::Var u, const numkit::Tensor& is_first,
                 std::span<const LayerStateT> x0, Mode mode) const;

  int64_t n_layers() const { return static_cast<int64_t>(layers_.size()); }
  const SsmLayer& layer(int64_t i) const { return layers_[static_cast<size_t>(i)]; }
  int64_t state_size() const { return layers_[0].config().state_size; }
  int64_t io_size() const { return layers_[0].config().io_size; }

 private:
  std::vector<SsmLayer> layers_;
};

}  // namespace sswm::ssm

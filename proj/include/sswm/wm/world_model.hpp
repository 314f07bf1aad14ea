#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sswm/numkit/optim.hpp"
#include "sswm/numkit/rng.hpp"
#include "sswm/ssm/layer.hpp"
#include "sswm/wm/dists.hpp"
#include "sswm/wm/nets.hpp"

namespace sswm::wm {

// Observation layout: one-hot categorical blocks first, continuous dims after.
struct ObsLayout {
  std::vector<int64_t> categorical;
  int64_t continuous = 0;
  int64_t dim() const {
    int64_t d = continuous;
    for (int64_t c : categorical) d += c;
    return d;
  }
};

struct WmSizes {
  int64_t h = 512;          // deterministic output width (trunk io width)
  int64_t x = 512;          // per-layer state size
  int64_t layers = 3;
  int64_t units = 1024;     // gated-transformation inner width
  int64_t hippo_blocks = 8;
  int64_t mlp_units = 512;  // encoder/head MLP width
  int64_t mlp_layers = 2;
  int64_t z_vars = 32;
  int64_t z_classes = 32;
  int64_t reward_bins = 255;
};

struct WmConfig {
  double beta_pred = 1.0;
  double beta_dyn = 0.5;
  double beta_rep = 0.1;
  double lr = 1e-4;
  double grad_clip = 1000.0;
  double adam_eps = 1e-8;
  double unimix = 0.01;
  double delta_min = 1e-3;
  double delta_max = 1e-1;
  bool learnable_start = false;
  WmSizes sizes;
  numkit::Dtype dtype = numkit::Dtype::F32;
};

// One replay sample, stacked (see replay module for the buffer side).
struct SequenceBatchView {
  numkit::Tensor obs;       // [B,T,obs_dim]
  numkit::Tensor actions;   // [B,T,A] one-hot
  numkit::Tensor reward;    // [B,T]
  numkit::Tensor cont;      // [B,T] 1 - done
  numkit::Tensor is_first;  // [B,T]
};

// Detached posterior features of one training batch (imagination starts).
struct PosteriorBundle {
  numkit::Tensor z;  // [B,T,z_vars*z_classes] one-hot sample
  numkit::Tensor h;  // [B,T,H]
  std::vector<ssm::LayerStateT> x;  // per layer [B*T? no: B,T,N] re/im
};

struct WmStepMetrics {
  bool skipped = false;
  double loss = 0, loss_obs = 0, loss_reward = 0, loss_cont = 0;
  double kl_dyn = 0, kl_rep = 0;  // unclamped means
  double grad_norm = 0;
};

class WorldModel {
 public:
  WorldModel(const WmConfig& cfg, ObsLayout layout, int64_t action_count, uint64_t seed);

  // How the sampled latent enters the graph. StraightThrough keeps exact one-hot
  // values with identity gradients on the probability path; Sample is a plain
  // constant (rollouts, acting).
  enum class LatentMode { Sample, StraightThrough };

  struct Encoded {
    numkit::Var logits;  // [.., z_vars, z_classes]
    numkit::Var probs;   // unimixed
    numkit::Var z;       // one-hot sample, flattened [.., z_dim]
  };
  // Non-recurrent representation model: z depends on the observation alone.
  // Rejects non-finite logits with a diagnostic.
  Encoded encode(numkit::Graph& g, numkit::Var obs, numkit::Rng& rng,
                 LatentMode mode = LatentMode::StraightThrough) const;

  // unimixed probabilities from logits: (1-u) softmax + u/K
  numkit::Var unimix_probs(numkit::Graph& g, numkit::Var logits) const;

  struct SeqOut {
    numkit::Var h;  // [B,T,H]
    std::vector<numkit::ComplexPair> states;  // per layer [B,T,N]
    std::vector<numkit::ComplexPair> last;    // per layer [B,N]
  };
  // Training-mode pass over a full batch: inputs are shifted by one step and masked
  // at episode starts; is_first flags drive the scan resets.
  SeqOut sequence_forward(numkit::Graph& g, numkit::Var actions, numkit::Var z,
                          const numkit::Tensor& is_first) const;
  // One recurrent step from explicit previous action/latent.
  SeqOut step_core(numkit::Graph& g, numkit::Var prev_action, numkit::Var prev_z,
                   const numkit::Tensor& is_first,
                   std::span<const ssm::LayerStateT> x0) const;

  struct Heads {
    numkit::Var obs_params;    // [.., obs_dim] categorical logits + continuous means
    numkit::Var reward_logits; // [.., bins]
    numkit::Var cont_logit;    // [.., 1]
    numkit::Var prior_logits;  // [.., z_vars, z_classes], from h alone
  };
  Heads heads_forward(numkit::Graph& g, numkit::Var z, numkit::Var h) const;
  // dynamics prediction alone: p(z | h) logits, [.., z_vars, z_classes]
  numkit::Var prior_forward(numkit::Graph& g, numkit::Var h) const;

  struct LossOut {
    numkit::Var total;
    numkit::Var nll_obs, nll_reward, nll_cont;  // scalars (batch/time means)
    numkit::Var kl_dyn_raw, kl_rep_raw;         // scalars, unclamped means
  };
  LossOut loss(numkit::Graph& g, const SequenceBatchView& batch, const Encoded& enc,
               const SeqOut& seq, const Heads& heads) const;

  // One optimization step; returns metrics plus the detached posterior features.
  WmStepMetrics train_step(const SequenceBatchView& batch, numkit::Rng& rng,
                           PosteriorBundle* posterior = nullptr);

  const WmConfig& config() const { return cfg_; }
  const ObsLayout& layout() const { return layout_; }
  int64_t action_count() const { return action_count_; }
  int64_t z_dim() const { return cfg_.sizes.z_vars * cfg_.sizes.z_classes; }
  int64_t h_dim() const { return cfg_.sizes.h; }
  int64_t x_dim() const { return cfg_.sizes.layers * 2 * cfg_.sizes.x; }
  const TwoHot& twohot() const { return twohot_; }
  const ssm::SsmStack& trunk() const { return *trunk_; }

  numkit::ParamStore& params() { return params_; }
  const numkit::ParamStore& params() const { return params_; }
  numkit::Adam& optimizer() { return *opt_; }

  // sample one-hot rows from probabilities [rows, classes]
  static numkit::Tensor sample_onehot(const numkit::Tensor& probs, int64_t classes,
                                      numkit::Rng& rng);

 private:
  WmConfig cfg_;
  ObsLayout layout_;
  int64_t action_count_;
  numkit::ParamStore params_;
  TwoHot twohot_;
  std::optional<ssm::SsmStack> trunk_;
  Mlp encoder_, prior_, obs_head_, reward_head_, cont_head_;
  Linear embed_;
  std::optional<numkit::Adam> opt_;
};

}  // namespace sswm::wm

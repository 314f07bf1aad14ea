#pragma once

#include <optional>
#include <vector>

#include "sswm/numkit/optim.hpp"
#include "sswm/wm/world_model.hpp"

namespace sswm::rl {

// Which model features condition the policy and value function.
enum class PolicyInput { OutputState, HiddenState, FullState };

const char* policy_input_name(PolicyInput m);
PolicyInput policy_input_from(const std::string& name);

struct AgentConfig {
  PolicyInput input = PolicyInput::OutputState;
  int64_t horizon = 15;
  double gamma = 0.997;
  double lambda = 0.95;
  double entropy_coef = 3e-4;
  // Table 3 lists only the world-model learning rate; this default is our choice.
  double lr = 3e-5;
  double adam_eps = 1e-5;
  double grad_clip = 100.0;
  double critic_ema_decay = 0.98;
  double critic_ema_reg = 1.0;
  double ret_norm_decay = 0.99;
  int64_t start_stride = 1;  // imagination starts every n-th posterior step
  int64_t mlp_units = 512;
  int64_t mlp_layers = 2;
};

struct ReturnNormState {
  double ema_scale = 0.0;
  double decay = 0.99;
  double divisor() const { return std::max(1.0, ema_scale); }
};

// Rollout of states, actions, rewards and continues over the imagination
// horizon, initialized from every selected posterior step.
struct ImaginedTrajectory {
  int64_t starts = 0;   // S
  int64_t horizon = 0;  // H
  numkit::Tensor z;     // [S, H+1, z_dim]   (j = 0..H)
  numkit::Tensor h;     // [S, H+1, H_dim]
  numkit::Tensor x;     // [S, H+1, x_dim]   (all layers, re then im per layer)
  numkit::Tensor actions;  // [S, H, A] one-hot  (j = 0..H-1)
  numkit::Tensor reward;   // [S, H]            (j = 1..H)
  numkit::Tensor cont;     // [S, H] continue probabilities
};

// Per-environment recurrent state for acting.
struct ActState {
  numkit::Tensor prev_action;  // [A] one-hot
  numkit::Tensor prev_z;       // [z_dim]
  std::vector<ssm::LayerStateT> x;  // per layer, [1,N]
  bool first = true;
};

struct AcMetrics {
  double actor_loss = 0, critic_loss = 0, entropy = 0;
  double actor_grad_norm = 0, critic_grad_norm = 0;
  double return_scale = 1.0;
  double mean_return = 0;
};

class Agent {
 public:
  Agent(const AgentConfig& cfg, const wm::WorldModel& wm, uint64_t seed);

  int64_t feat_dim() const { return feat_dim_; }
  const AgentConfig& config() const { return cfg_; }

  // Rolls the frozen world model forward from every selected posterior step.
  // Rejects horizons < 1.
  ImaginedTrajectory imagine(const wm::WorldModel& wm, const wm::PosteriorBundle& starts,
                             int64_t horizon, numkit::Rng& rng) const;

  // R_j = r_j + gamma*c_j*((1-lambda) v_j + lambda R_{j+1}), R_H = v_H.
  // reward/cont are [S,H] (j=1..H), values [S,H+1] (j=0..H); returns [S,H] (j=1..H).
  static numkit::Tensor lambda_returns(const numkit::Tensor& reward, const numkit::Tensor& cont,
                                       const numkit::Tensor& values, double gamma, double lambda);

  // Percentile-based scale update; returns the divisor max(1, ema).
  static double normalize_returns(const numkit::Tensor& returns, ReturnNormState& state);

  // One actor-critic update from imagination.
  AcMetrics train_step(const wm::WorldModel& wm, const wm::PosteriorBundle& starts,
                       numkit::Rng& rng);

  // Policy/value evaluation on assembled features.
  numkit::Var policy_logits(numkit::Graph& g, numkit::Var feats) const;
  numkit::Var critic_logits(numkit::Graph& g, numkit::Var feats) const;
  numkit::Var ema_critic_logits(numkit::Graph& g, numkit::Var feats) const;
  numkit::Tensor critic_values(const numkit::Tensor& feats, const wm::WorldModel& wm) const;

  // Feature assembly per policy-input mode; inputs are per-step host tensors.
  numkit::Tensor assemble_features(const numkit::Tensor& z, const numkit::Tensor& h,
                                   const numkit::Tensor& x) const;

  // Environment interaction. Each state is single-owner; batched acting stacks them.
  std::vector<int64_t> act_batch(const wm::WorldModel& wm, std::span<ActState> states,
                                 const numkit::Tensor& obs, bool explore, numkit::Rng& rng) const;
  int64_t act(const wm::WorldModel& wm, ActState& state, const numkit::Tensor& obs, bool explore,
              numkit::Rng& rng) const;
  ActState initial_state(const wm::WorldModel& wm) const;

  ReturnNormState& norm_state() { return norm_; }
  numkit::ParamStore& actor_params() { return actor_ps_; }
  numkit::ParamStore& critic_params() { return critic_ps_; }
  numkit::ParamStore& ema_params() { return ema_ps_; }
  numkit::Adam& actor_optimizer() { return *actor_opt_; }
  numkit::Adam& critic_optimizer() { return *critic_opt_; }

 private:
  AgentConfig cfg_;
  int64_t action_count_;
  int64_t feat_dim_;
  numkit::Dtype dt_;
  numkit::ParamStore actor_ps_, critic_ps_, ema_ps_;
  wm::Mlp actor_, critic_, ema_critic_;
  std::optional<numkit::Adam> actor_opt_, critic_opt_;
  ReturnNormState norm_;
};

}  // namespace sswm::rl

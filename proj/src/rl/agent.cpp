#include "sswm/rl/agent.hpp"

#include <algorithm>
#include <cmath>

namespace sswm::rl {

using numkit::Dtype;
using numkit::Graph;
using numkit::Rng;
using numkit::Shape;
using numkit::Tensor;
using numkit::Var;
using wm::PosteriorBundle;
using wm::WorldModel;

const char* policy_input_name(PolicyInput m) {
  switch (m) {
    case PolicyInput::OutputState:
      return "output";
    case PolicyInput::HiddenState:
      return "hidden";
    case PolicyInput::FullState:
      return "full";
  }
  return "?";
}

PolicyInput policy_input_from(const std::string& name) {
  if (name == "output" || name == "output_state") return PolicyInput::OutputState;
  if (name == "hidden" || name == "hidden_state") return PolicyInput::HiddenState;
  if (name == "full" || name == "full_state") return PolicyInput::FullState;
  numkit::fail("unknown policy input '" + name + "' (expected output|hidden|full)");
}

Agent::Agent(const AgentConfig& cfg, const WorldModel& wm, uint64_t seed)
    : cfg_(cfg), action_count_(wm.action_count()), dt_(wm.config().dtype) {
  switch (cfg.input) {
    case PolicyInput::OutputState:
      feat_dim_ = wm.z_dim() + wm.h_dim();
      break;
    case PolicyInput::HiddenState:
      feat_dim_ = wm.z_dim() + wm.x_dim();
      break;
    case PolicyInput::FullState:
      feat_dim_ = wm.z_dim() + wm.h_dim() + wm.x_dim();
      break;
  }
  Rng ra(numkit::split_seed(seed, 1));
  Rng rc(numkit::split_seed(seed, 2));
  actor_ = wm::Mlp(actor_ps_, "actor", feat_dim_, cfg.mlp_units, cfg.mlp_layers, action_count_,
                   ra, dt_, 0.0);
  critic_ = wm::Mlp(critic_ps_, "critic", feat_dim_, cfg.mlp_units, cfg.mlp_layers,
                    wm.twohot().bins(), rc, dt_, 0.0);
  Rng rc2(numkit::split_seed(seed, 2));
  ema_critic_ = wm::Mlp(ema_ps_, "critic", feat_dim_, cfg.mlp_units, cfg.mlp_layers,
                        wm.twohot().bins(), rc2, dt_, 0.0);
  // shadow starts as an exact copy
  for (size_t i = 0; i < critic_ps_.size(); ++i)
    ema_ps_.value(static_cast<numkit::ParamId>(i)) =
        critic_ps_.value(static_cast<numkit::ParamId>(i));
  actor_opt_.emplace(actor_ps_,
                     numkit::AdamConfig{.lr = cfg.lr, .eps = cfg.adam_eps, .clip = cfg.grad_clip});
  critic_opt_.emplace(critic_ps_,
                      numkit::AdamConfig{.lr = cfg.lr, .eps = cfg.adam_eps, .clip = cfg.grad_clip});
}

Var Agent::policy_logits(Graph& g, Var feats) const { return actor_(g, feats); }
Var Agent::critic_logits(Graph& g, Var feats) const { return critic_(g, feats); }
Var Agent::ema_critic_logits(Graph& g, Var feats) const { return ema_critic_(g, feats); }

Tensor Agent::assemble_features(const Tensor& z, const Tensor& h, const Tensor& x) const {
  const int64_t rows = z.dim(0);
  const int64_t zd = z.dim(1);
  const int64_t hd = h.numel() ? h.dim(1) : 0;
  const int64_t xd = x.numel() ? x.dim(1) : 0;
  Tensor out({rows, feat_dim_}, dt_);
  for (int64_t r = 0; r < rows; ++r) {
    int64_t off = r * feat_dim_;
    for (int64_t i = 0; i < zd; ++i) out.set(off++, z.at(r * zd + i));
    if (cfg_.input == PolicyInput::OutputState || cfg_.input == PolicyInput::FullState)
      for (int64_t i = 0; i < hd; ++i) out.set(off++, h.at(r * hd + i));
    if (cfg_.input == PolicyInput::HiddenState || cfg_.input == PolicyInput::FullState)
      for (int64_t i = 0; i < xd; ++i) out.set(off++, x.at(r * xd + i));
    if (off != (r + 1) * feat_dim_) numkit::fail("feature assembly width mismatch");
  }
  return out;
}

namespace {

// flatten per-layer complex states [S,N] pairs into [S, layers*2N]
Tensor flatten_states(const std::vector<ssm::LayerStateT>& layers, Dtype dt) {
  const int64_t s = layers[0].first.dim(0);
  const int64_t n = layers[0].first.dim(1);
  const int64_t width = static_cast<int64_t>(layers.size()) * 2 * n;
  Tensor out({s, width}, dt);
  for (int64_t r = 0; r < s; ++r) {
    int64_t off = r * width;
    for (const auto& [re, im] : layers) {
      for (int64_t i = 0; i < n; ++i) out.set(off++, re.at(r * n + i));
      for (int64_t i = 0; i < n; ++i) out.set(off++, im.at(r * n + i));
    }
  }
  return out;
}

int64_t sample_or_argmax(std::span<const double> probs, bool explore, Rng& rng) {
  if (explore) return rng.categorical(probs);
  int64_t best = 0;
  for (size_t i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[best]) best = static_cast<int64_t>(i);
  return best;
}

}  // namespace

ImaginedTrajectory Agent::imagine(const WorldModel& wm, const PosteriorBundle& starts,
                                  int64_t horizon, Rng& rng) const {
  if (horizon < 1) numkit::fail("imagine: horizon must be at least 1");
  const int64_t B = starts.z.dim(0), T = starts.z.dim(1);
  const int64_t zd = wm.z_dim(), hd = wm.h_dim();
  const int64_t layers = static_cast<int64_t>(starts.x.size());
  const int64_t n = wm.config().sizes.x;
  const int64_t stride = std::max<int64_t>(1, cfg_.start_stride);

  std::vector<std::pair<int64_t, int64_t>> picks;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < T; t += stride) picks.push_back({b, t});
  const int64_t S = static_cast<int64_t>(picks.size());

  ImaginedTrajectory traj;
  traj.starts = S;
  traj.horizon = horizon;
  traj.z = Tensor({S, horizon + 1, zd}, dt_);
  traj.h = Tensor({S, horizon + 1, hd}, dt_);
  traj.x = Tensor({S, horizon + 1, layers * 2 * n}, dt_);
  traj.actions = Tensor({S, horizon, action_count_}, dt_);
  traj.reward = Tensor({S, horizon}, dt_);
  traj.cont = Tensor({S, horizon}, dt_);

  // current step state (host)
  Tensor z({S, zd}, dt_), h({S, hd}, dt_);
  std::vector<ssm::LayerStateT> x;
  for (int64_t l = 0; l < layers; ++l)
    x.push_back({Tensor({S, n}, dt_), Tensor({S, n}, dt_)});
  for (int64_t s = 0; s < S; ++s) {
    const auto [b, t] = picks[static_cast<size_t>(s)];
    for (int64_t i = 0; i < zd; ++i) z.set(s * zd + i, starts.z.at((b * T + t) * zd + i));
    for (int64_t i = 0; i < hd; ++i) h.set(s * hd + i, starts.h.at((b * T + t) * hd + i));
    for (int64_t l = 0; l < layers; ++l)
      for (int64_t i = 0; i < n; ++i) {
        x[static_cast<size_t>(l)].first.set(s * n + i,
                                            starts.x[static_cast<size_t>(l)].first.at((b * T + t) * n + i));
        x[static_cast<size_t>(l)].second.set(
            s * n + i, starts.x[static_cast<size_t>(l)].second.at((b * T + t) * n + i));
      }
  }

  auto record_state = [&](int64_t j) {
    Tensor xf = flatten_states(x, dt_);
    for (int64_t s = 0; s < S; ++s) {
      for (int64_t i = 0; i < zd; ++i) traj.z.set((s * (horizon + 1) + j) * zd + i, z.at(s * zd + i));
      for (int64_t i = 0; i < hd; ++i) traj.h.set((s * (horizon + 1) + j) * hd + i, h.at(s * hd + i));
      for (int64_t i = 0; i < xf.dim(1); ++i)
        traj.x.set((s * (horizon + 1) + j) * xf.dim(1) + i, xf.at(s * xf.dim(1) + i));
    }
  };
  record_state(0);

  const Tensor no_reset = Tensor::zeros({S}, dt_);
  for (int64_t j = 0; j < horizon; ++j) {
    Graph g;
    // action from the policy on the current features
    Tensor feats = assemble_features(z, h, flatten_states(x, dt_));
    Var logits = policy_logits(g, g.constant(feats));
    const Tensor& pv = g.value(g.softmax(logits));
    Tensor onehot = Tensor::zeros({S, action_count_}, dt_);
    std::vector<double> row(static_cast<size_t>(action_count_));
    for (int64_t s = 0; s < S; ++s) {
      for (int64_t a = 0; a < action_count_; ++a)
        row[static_cast<size_t>(a)] = pv.at(s * action_count_ + a);
      const int64_t pick = rng.categorical(row);
      onehot.set(s * action_count_ + pick, 1.0);
      traj.actions.set((s * horizon + j) * action_count_ + pick, 1.0);
    }

    // one recurrent model step on (action, z)
    auto out = wm.step_core(g, g.constant(onehot), g.constant(z), no_reset, x);
    h = g.value(out.h).reshaped({S, hd});
    for (int64_t l = 0; l < layers; ++l)
      x[static_cast<size_t>(l)] = {g.value(out.last[static_cast<size_t>(l)].re),
                                   g.value(out.last[static_cast<size_t>(l)].im)};

    // next latent from the prior, rewards and continues from the heads
    Var prior_probs = wm.unimix_probs(g, wm.prior_forward(g, out.h));
    Tensor zs = WorldModel::sample_onehot(g.value(prior_probs), wm.config().sizes.z_classes, rng);
    z = zs.reshaped({S, zd});
    auto heads = wm.heads_forward(g, g.reshape(g.constant(z), {S, 1, zd}), out.h);
    Tensor rew_probs = g.value(g.softmax(heads.reward_logits));
    Tensor cont_prob = g.value(g.sigmoid(heads.cont_logit));
    for (int64_t s = 0; s < S; ++s) {
      std::vector<double> rp(static_cast<size_t>(wm.twohot().bins()));
      for (int64_t k = 0; k < wm.twohot().bins(); ++k)
        rp[static_cast<size_t>(k)] = rew_probs.at(s * wm.twohot().bins() + k);
      traj.reward.set(s * horizon + j, wm.twohot().decode_row(rp));
      traj.cont.set(s * horizon + j, cont_prob.at(s));
    }
    record_state(j + 1);
  }
  return traj;
}

Tensor Agent::lambda_returns(const Tensor& reward, const Tensor& cont, const Tensor& values,
                             double gamma, double lambda) {
  const int64_t S = reward.dim(0), H = reward.dim(1);
  if (values.dim(1) != H + 1) numkit::fail("lambda_returns: values must cover steps 0..H");
  for (int64_t i = 0; i < cont.numel(); ++i)
    if (cont.at(i) < 0.0 || cont.at(i) > 1.0)
      numkit::fail("lambda_returns: continue probabilities must lie in [0,1]");
  Tensor out({S, H}, reward.dtype());
  for (int64_t s = 0; s < S; ++s) {
    double next = values.at(s * (H + 1) + H);  // R_H = v_H
    out.set(s * H + H - 1, next);
    for (int64_t j = H - 1; j >= 1; --j) {
      const double c = gamma * cont.at(s * H + j - 1);
      const double v = values.at(s * (H + 1) + j);
      const double r = reward.at(s * H + j - 1);
      const double ret = r + c * ((1.0 - lambda) * v + lambda * next);
      out.set(s * H + j - 1, ret);
      next = ret;
    }
  }
  return out;
}

double Agent::normalize_returns(const Tensor& returns, ReturnNormState& state) {
  if (returns.numel() == 0) numkit::fail("normalize_returns: empty batch");
  std::vector<double> flat = returns.to_vector();
  std::sort(flat.begin(), flat.end());
  auto percentile = [&](double q) {
    const double rank = q / 100.0 * static_cast<double>(flat.size() - 1);
    const int64_t lo = static_cast<int64_t>(std::floor(rank));
    const int64_t hi = std::min<int64_t>(lo + 1, static_cast<int64_t>(flat.size()) - 1);
    const double w = rank - static_cast<double>(lo);
    return flat[static_cast<size_t>(lo)] * (1.0 - w) + flat[static_cast<size_t>(hi)] * w;
  };
  const double raw = percentile(95.0) - percentile(5.0);
  state.ema_scale = state.decay * state.ema_scale + (1.0 - state.decay) * raw;
  return state.divisor();
}

Tensor Agent::critic_values(const Tensor& feats, const WorldModel& wm) const {
  Graph g;
  Var logits = critic_(g, g.constant(feats));
  Tensor probs = g.value(g.softmax(logits));
  return wm.twohot().decode(probs);
}

AcMetrics Agent::train_step(const WorldModel& wm, const PosteriorBundle& starts, Rng& rng) {
  AcMetrics m;
  const int64_t Hn = cfg_.horizon;
  ImaginedTrajectory traj = imagine(wm, starts, Hn, rng);
  const int64_t S = traj.starts;

  // values at every imagined state (no gradient; targets and baselines)
  Tensor feats_all({S * (Hn + 1), feat_dim_}, dt_);
  {
    Tensor z2 = traj.z.reshaped({S * (Hn + 1), wm.z_dim()});
    Tensor h2 = traj.h.reshaped({S * (Hn + 1), wm.h_dim()});
    Tensor x2 = traj.x.reshaped({S * (Hn + 1), traj.x.dim(2)});
    feats_all = assemble_features(z2, h2, x2);
  }
  Tensor values = critic_values(feats_all, wm).reshaped({S, Hn + 1});
  Tensor returns = lambda_returns(traj.reward, traj.cont, values, cfg_.gamma, cfg_.lambda);
  const double divisor = normalize_returns(returns, norm_);
  m.return_scale = divisor;
  {
    double acc = 0;
    for (int64_t i = 0; i < returns.numel(); ++i) acc += returns.at(i);
    m.mean_return = acc / static_cast<double>(returns.numel());
  }

  // actor: Reinforce with the normalized advantage and an entropy bonus
  {
    Tensor feats_act({S * Hn, feat_dim_}, dt_);
    Tensor adv({S * Hn, 1}, dt_);
    for (int64_t s = 0; s < S; ++s)
      for (int64_t j = 0; j < Hn; ++j) {
        for (int64_t i = 0; i < feat_dim_; ++i)
          feats_act.set((s * Hn + j) * feat_dim_ + i,
                        feats_all.at((s * (Hn + 1) + j) * feat_dim_ + i));
        adv.set(s * Hn + j, (returns.at(s * Hn + j) - values.at(s * (Hn + 1) + j)) / divisor);
      }
    Graph g;
    Var logits = policy_logits(g, g.constant(feats_act));
    Var logp = g.log_softmax(logits);
    Var chosen =
        g.sum_axis(g.mul(logp, g.constant(traj.actions.reshaped({S * Hn, action_count_}))), 1);
    Var pg = g.neg(g.mean(g.mul(chosen, g.constant(adv))));
    Var entropy = g.neg(g.mean(g.sum_axis(g.mul(g.softmax(logits), logp), 1)));
    Var loss = g.sub(pg, g.mul(entropy, g.constant_like(cfg_.entropy_coef, entropy)));
    m.actor_loss = g.value(loss).item();
    m.entropy = g.value(entropy).item();
    g.backward(loss);
    m.actor_grad_norm = actor_opt_->step(g.grads_for(actor_ps_));
  }

  // critic: twohot regression toward the lambda returns plus the shadow regularizer;
  // the bootstrap state j=H carries no target
  if (Hn > 1) {
    const int64_t rows = S * (Hn - 1);
    Tensor feats_cr({rows, feat_dim_}, dt_);
    Tensor target_vals({rows}, dt_);
    for (int64_t s = 0; s < S; ++s)
      for (int64_t j = 1; j < Hn; ++j) {
        const int64_t r = s * (Hn - 1) + (j - 1);
        for (int64_t i = 0; i < feat_dim_; ++i)
          feats_cr.set(r * feat_dim_ + i, feats_all.at((s * (Hn + 1) + j) * feat_dim_ + i));
        target_vals.set(r, returns.at(s * Hn + (j - 1)));
      }
    Graph g;
    Var feats = g.constant(feats_cr);
    Var logits = critic_logits(g, feats);
    Var logp = g.log_softmax(logits);
    Var target = g.constant(wm.twohot().encode(target_vals, dt_));
    Var ce = g.neg(g.mean(g.sum_axis(g.mul(target, logp), 1)));
    Var ema_probs = g.stop_grad(g.softmax(ema_critic_logits(g, feats)));
    Var reg = g.neg(g.mean(g.sum_axis(g.mul(ema_probs, logp), 1)));
    Var loss = g.add(ce, g.mul(reg, g.constant_like(cfg_.critic_ema_reg, reg)));
    m.critic_loss = g.value(loss).item();
    g.backward(loss);
    m.critic_grad_norm = critic_opt_->step(g.grads_for(critic_ps_));
  }

  // shadow critic update
  for (size_t i = 0; i < critic_ps_.size(); ++i) {
    Tensor& e = ema_ps_.value(static_cast<numkit::ParamId>(i));
    const Tensor& c = critic_ps_.value(static_cast<numkit::ParamId>(i));
    numkit::dispatch(e.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pe = e.data<T>();
      auto pc = c.data<T>();
      for (size_t k = 0; k < pe.size(); ++k)
        pe[k] = static_cast<T>(cfg_.critic_ema_decay * static_cast<double>(pe[k]) +
                               (1.0 - cfg_.critic_ema_decay) * static_cast<double>(pc[k]));
    });
  }
  return m;
}

ActState Agent::initial_state(const WorldModel& wm) const {
  ActState st;
  st.prev_action = Tensor::zeros({action_count_}, dt_);
  st.prev_z = Tensor::zeros({wm.z_dim()}, dt_);
  for (int64_t l = 0; l < wm.config().sizes.layers; ++l)
    st.x.push_back({Tensor::zeros({1, wm.config().sizes.x}, dt_),
                    Tensor::zeros({1, wm.config().sizes.x}, dt_)});
  st.first = true;
  return st;
}

std::vector<int64_t> Agent::act_batch(const WorldModel& wm, std::span<ActState> states,
                                      const Tensor& obs, bool explore, Rng& rng) const {
  const int64_t K = static_cast<int64_t>(states.size());
  if (obs.dim(0) != K)
    numkit::fail("act: " + std::to_string(obs.dim(0)) + " observations for " + std::to_string(K) +
                 " states");
  if (obs.dim(1) != wm.layout().dim())
    numkit::fail("act: observation width " + std::to_string(obs.dim(1)) + " does not match " +
                 std::to_string(wm.layout().dim()));
  const int64_t zd = wm.z_dim(), hd = wm.h_dim();
  const int64_t layers = wm.config().sizes.layers, n = wm.config().sizes.x;

  Tensor prev_a({K, action_count_}, dt_), prev_z({K, zd}, dt_), first({K}, dt_);
  std::vector<ssm::LayerStateT> x0;
  for (int64_t l = 0; l < layers; ++l)
    x0.push_back({Tensor({K, n}, dt_), Tensor({K, n}, dt_)});
  for (int64_t k = 0; k < K; ++k) {
    const ActState& st = states[static_cast<size_t>(k)];
    for (int64_t i = 0; i < action_count_; ++i)
      prev_a.set(k * action_count_ + i, st.prev_action.at(i));
    for (int64_t i = 0; i < zd; ++i) prev_z.set(k * zd + i, st.prev_z.at(i));
    first.set(k, st.first ? 1.0 : 0.0);
    for (int64_t l = 0; l < layers; ++l)
      for (int64_t i = 0; i < n; ++i) {
        x0[static_cast<size_t>(l)].first.set(k * n + i, st.x[static_cast<size_t>(l)].first.at(i));
        x0[static_cast<size_t>(l)].second.set(k * n + i, st.x[static_cast<size_t>(l)].second.at(i));
      }
  }

  Graph g;
  auto out = wm.step_core(g, g.constant(prev_a), g.constant(prev_z), first, x0);
  auto enc = wm.encode(g, g.constant(obs.cast(dt_)), rng, WorldModel::LatentMode::Sample);
  Tensor z = g.value(enc.z);
  Tensor h = g.value(out.h).reshaped({K, hd});
  std::vector<ssm::LayerStateT> xl;
  for (int64_t l = 0; l < layers; ++l)
    xl.push_back({g.value(out.last[static_cast<size_t>(l)].re),
                  g.value(out.last[static_cast<size_t>(l)].im)});
  Tensor feats = assemble_features(z, h, flatten_states(xl, dt_));
  Var logits = policy_logits(g, g.constant(feats));
  Tensor probs = g.value(g.softmax(logits));

  std::vector<int64_t> actions(static_cast<size_t>(K));
  std::vector<double> row(static_cast<size_t>(action_count_));
  for (int64_t k = 0; k < K; ++k) {
    for (int64_t a = 0; a < action_count_; ++a)
      row[static_cast<size_t>(a)] = probs.at(k * action_count_ + a);
    actions[static_cast<size_t>(k)] = sample_or_argmax(row, explore, rng);
    ActState& st = states[static_cast<size_t>(k)];
    st.prev_action = Tensor::zeros({action_count_}, dt_);
    st.prev_action.set(actions[static_cast<size_t>(k)], 1.0);
    Tensor zk({zd}, dt_);
    for (int64_t i = 0; i < zd; ++i) zk.set(i, z.at(k * zd + i));
    st.prev_z = zk;
    for (int64_t l = 0; l < layers; ++l) {
      Tensor re({1, n}, dt_), im({1, n}, dt_);
      for (int64_t i = 0; i < n; ++i) {
        re.set(i, xl[static_cast<size_t>(l)].first.at(k * n + i));
        im.set(i, xl[static_cast<size_t>(l)].second.at(k * n + i));
      }
      st.x[static_cast<size_t>(l)] = {re, im};
    }
    st.first = false;
  }
  return actions;
}

int64_t Agent::act(const WorldModel& wm, ActState& state, const Tensor& obs, bool explore,
                   Rng& rng) const {
  Tensor obs2 = obs.reshaped({1, obs.numel()});
  return act_batch(wm, std::span<ActState>(&state, 1), obs2, explore, rng)[0];
}

}  // namespace sswm::rl

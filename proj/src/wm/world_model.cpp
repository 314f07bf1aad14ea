#include "sswm/wm/world_model.hpp"

#include <cmath>

namespace sswm::wm {

using numkit::ComplexPair;
using numkit::Dtype;
using numkit::Graph;
using numkit::Rng;
using numkit::Shape;
using numkit::Tensor;
using numkit::Var;
using numkit::shape_str;

WorldModel::WorldModel(const WmConfig& cfg, ObsLayout layout, int64_t action_count, uint64_t seed)
    : cfg_(cfg),
      layout_(std::move(layout)),
      action_count_(action_count),
      twohot_(cfg.sizes.reward_bins) {
  const WmSizes& s = cfg_.sizes;
  const Dtype dt = cfg_.dtype;
  ssm::SsmLayerConfig lc;
  lc.state_size = s.x;
  lc.io_size = s.h;
  lc.hippo_blocks = s.hippo_blocks;
  lc.delta_min = cfg.delta_min;
  lc.delta_max = cfg.delta_max;
  lc.glu_units = s.units;
  lc.learnable_start = cfg.learnable_start;
  trunk_.emplace(params_, "seq", s.layers, lc, numkit::split_seed(seed, 1), dt);

  Rng rng(numkit::split_seed(seed, 2));
  const int64_t zd = z_dim();
  const int64_t feat = zd + s.h;
  encoder_ = Mlp(params_, "enc", layout_.dim(), s.mlp_units, s.mlp_layers, zd, rng, dt);
  prior_ = Mlp(params_, "prior", s.h, s.mlp_units, s.mlp_layers, zd, rng, dt);
  obs_head_ = Mlp(params_, "head.obs", feat, s.mlp_units, s.mlp_layers, layout_.dim(), rng, dt);
  reward_head_ =
      Mlp(params_, "head.reward", feat, s.mlp_units, s.mlp_layers, s.reward_bins, rng, dt, 0.0);
  cont_head_ = Mlp(params_, "head.cont", feat, s.mlp_units, s.mlp_layers, 1, rng, dt);
  embed_ = Linear(params_, "embed", action_count_ + zd, s.h, rng, dt);

  opt_.emplace(params_, numkit::AdamConfig{.lr = cfg.lr,
                                           .eps = cfg.adam_eps,
                                           .clip = cfg.grad_clip});
}

Var WorldModel::unimix_probs(Graph& g, Var logits) const {
  Var sm = g.softmax(logits);
  const double u = cfg_.unimix;
  const double k = static_cast<double>(cfg_.sizes.z_classes);
  Var scaled = g.mul(sm, g.constant_like(1.0 - u, sm));
  return g.add(scaled, g.constant_like(u / k, sm));
}

Tensor WorldModel::sample_onehot(const Tensor& probs, int64_t classes, Rng& rng) {
  Tensor out = Tensor::zeros(probs.shape(), probs.dtype());
  const int64_t rows = probs.numel() / classes;
  std::vector<double> row(static_cast<size_t>(classes));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < classes; ++c) row[static_cast<size_t>(c)] = probs.at(r * classes + c);
    const int64_t pick = rng.categorical(row);
    out.set(r * classes + pick, 1.0);
  }
  return out;
}

WorldModel::Encoded WorldModel::encode(Graph& g, Var obs, Rng& rng, LatentMode mode) const {
  const Shape os = g.shape(obs);
  if (os.empty() || os.back() != layout_.dim())
    numkit::fail("encode: observation last axis must be " + std::to_string(layout_.dim()) +
                 ", got " + shape_str(os));
  Var flat_logits = encoder_(g, obs);
  if (!g.value(flat_logits).all_finite())
    numkit::fail("encode: non-finite logits; aborting training step");
  Shape zshape(os.begin(), os.end() - 1);
  zshape.push_back(cfg_.sizes.z_vars);
  zshape.push_back(cfg_.sizes.z_classes);
  Var logits = g.reshape(flat_logits, zshape);
  Var probs = unimix_probs(g, logits);
  Tensor sample = sample_onehot(g.value(probs), cfg_.sizes.z_classes, rng);
  Shape flat(os.begin(), os.end() - 1);
  flat.push_back(z_dim());
  Var z;
  if (mode == LatentMode::StraightThrough)
    z = g.reshape(g.straight_through(probs, sample), flat);
  else
    z = g.reshape(g.constant(sample), flat);
  return {logits, probs, z};
}

WorldModel::SeqOut WorldModel::sequence_forward(Graph& g, Var actions, Var z,
                                                const Tensor& is_first) const {
  const Shape& as = g.shape(actions);
  const Shape& zs = g.shape(z);
  if (as.size() != 3 || zs.size() != 3 || as[0] != zs[0] || as[1] != zs[1])
    numkit::fail("sequence_forward: actions " + shape_str(as) + " and latents " + shape_str(zs) +
                 " disagree");
  const int64_t B = as[0], T = as[1];
  const Dtype dt = g.dtype(actions);

  // step t consumes (a_{t-1}, z_{t-1}); the first step and episode starts use zeros
  Var prev_a = actions;
  Var prev_z = z;
  if (T > 1) {
    Var za = g.constant(Tensor::zeros({B, 1, as[2]}, dt));
    Var zz = g.constant(Tensor::zeros({B, 1, zs[2]}, dt));
    std::vector<Var> pa{za, g.slice(actions, 1, 0, T - 1)};
    std::vector<Var> pz{zz, g.slice(z, 1, 0, T - 1)};
    prev_a = g.concat(pa, 1);
    prev_z = g.concat(pz, 1);
  } else {
    prev_a = g.constant(Tensor::zeros({B, 1, as[2]}, dt));
    prev_z = g.constant(Tensor::zeros({B, 1, zs[2]}, dt));
  }
  Tensor mask_host({B, T, 1}, dt);
  for (int64_t i = 0; i < B * T; ++i) mask_host.set(i, 1.0 - is_first.at(i));
  Var mask = g.constant(mask_host);
  std::vector<Var> parts{g.mul(prev_a, mask), g.mul(prev_z, mask)};
  Var inp = embed_(g, g.concat(parts, 2));
  auto out = trunk_->forward(g, inp, is_first.cast(dt), {}, ssm::Mode::Parallel);
  return {out.h, out.states, out.last};
}

WorldModel::SeqOut WorldModel::step_core(Graph& g, Var prev_action, Var prev_z,
                                         const Tensor& is_first,
                                         std::span<const ssm::LayerStateT> x0) const {
  const Shape& as = g.shape(prev_action);
  const int64_t K = as[0];
  const Dtype dt = g.dtype(prev_action);
  Tensor mask_host({K, 1, 1}, dt);
  Tensor first2({K, 1}, dt);
  for (int64_t i = 0; i < K; ++i) {
    mask_host.set(i, 1.0 - is_first.at(i));
    first2.set(i, is_first.at(i));
  }
  std::vector<Var> parts{g.reshape(prev_action, {K, 1, as[1]}),
                         g.reshape(prev_z, {K, 1, g.shape(prev_z)[1]})};
  Var inp = embed_(g, g.mul(g.concat(parts, 2), g.constant(mask_host)));
  auto out = trunk_->forward(g, inp, first2, x0, ssm::Mode::Recurrent);
  return {out.h, out.states, out.last};
}

WorldModel::Heads WorldModel::heads_forward(Graph& g, Var z, Var h) const {
  std::vector<Var> parts{z, h};
  Var feat = g.concat(parts, -1);
  Heads out;
  out.obs_params = obs_head_(g, feat);
  out.reward_logits = reward_head_(g, feat);
  out.cont_logit = cont_head_(g, feat);
  out.prior_logits = prior_forward(g, h);
  return out;
}

Var WorldModel::prior_forward(Graph& g, Var h) const {
  Shape hs = g.shape(h);
  Shape zshape(hs.begin(), hs.end() - 1);
  zshape.push_back(cfg_.sizes.z_vars);
  zshape.push_back(cfg_.sizes.z_classes);
  return g.reshape(prior_(g, h), zshape);
}

namespace {

// categorical KL per latent variable, summed over variables -> [B,T,1]
Var kl_summed(Graph& g, Var q_probs, Var p_probs) {
  Var term = g.mul(q_probs, g.sub(g.log(q_probs), g.log(p_probs)));
  Var per_var = g.sum_axis(term, 3);       // [B,T,V,1]
  Var summed = g.sum_axis(per_var, 2);     // [B,T,1,1]
  const Shape& s = g.shape(summed);
  return g.reshape(summed, {s[0], s[1], 1});
}

}  // namespace

WorldModel::LossOut WorldModel::loss(Graph& g, const SequenceBatchView& batch, const Encoded& enc,
                                     const SeqOut& seq, const Heads& heads) const {
  const Dtype dt = cfg_.dtype;
  const int64_t B = batch.obs.dim(0), T = batch.obs.dim(1);

  // observation likelihood: cross-entropy per categorical block, squared error on
  // symlog-transformed values for continuous dims
  Var nll_obs_bt;
  {
    Var acc;
    int64_t off = 0;
    Var obs_const = g.constant(batch.obs.cast(dt));
    for (int64_t classes : layout_.categorical) {
      Var logits = g.slice(heads.obs_params, 2, off, classes);
      Var target = g.slice(obs_const, 2, off, classes);
      Var ce = g.neg(g.sum_axis(g.mul(target, g.log_softmax(logits)), 2));
      acc = acc.valid() ? g.add(acc, ce) : ce;
      off += classes;
    }
    if (layout_.continuous > 0) {
      Var mu = g.slice(heads.obs_params, 2, off, layout_.continuous);
      Tensor target_host({B, T, layout_.continuous}, dt);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < T; ++t)
          for (int64_t i = 0; i < layout_.continuous; ++i) {
            const int64_t src = (b * T + t) * layout_.dim() + off + i;
            target_host.set((b * T + t) * layout_.continuous + i, symlog(batch.obs.at(src)));
          }
      Var diff = g.sub(mu, g.constant(target_host));
      Var se = g.sum_axis(g.mul(diff, diff), 2);
      acc = acc.valid() ? g.add(acc, se) : se;
    }
    nll_obs_bt = acc;
  }

  // reward: cross-entropy against the twohot of the symlog target
  Var target_rew = g.constant(twohot_.encode(batch.reward, dt));
  Var nll_rew_bt = g.neg(g.sum_axis(g.mul(target_rew, g.log_softmax(heads.reward_logits)), 2));

  // continue: Bernoulli on the logit; softplus(l) - l*c is the stable form
  Tensor cont_host({B, T, 1}, dt);
  for (int64_t i = 0; i < B * T; ++i) cont_host.set(i, batch.cont.at(i));
  Var cont_c = g.constant(cont_host);
  Var nll_cont_bt = g.sub(g.softplus(heads.cont_logit), g.mul(heads.cont_logit, cont_c));

  // KL terms with balancing: the posterior is held fixed in the dyn term and the
  // prior is held fixed in the rep term; both sides use unimixed probabilities
  Var q = enc.probs;
  Var p = unimix_probs(g, heads.prior_logits);
  Var kl_dyn_bt = kl_summed(g, g.stop_grad(q), p);
  Var kl_rep_bt = kl_summed(g, q, g.stop_grad(p));

  const double bp = cfg_.beta_pred, bd = cfg_.beta_dyn, br = cfg_.beta_rep;
  Var pred = g.add(g.add(nll_obs_bt, nll_rew_bt), nll_cont_bt);
  Var total_bt = g.add(
      g.mul(pred, g.constant_like(bp, pred)),
      g.add(g.mul(g.clamp_min(kl_dyn_bt, 1.0), g.constant_like(bd, kl_dyn_bt)),
            g.mul(g.clamp_min(kl_rep_bt, 1.0), g.constant_like(br, kl_rep_bt))));

  LossOut out;
  out.total = g.mean(total_bt);
  out.nll_obs = g.mean(nll_obs_bt);
  out.nll_reward = g.mean(nll_rew_bt);
  out.nll_cont = g.mean(nll_cont_bt);
  out.kl_dyn_raw = g.mean(kl_dyn_bt);
  out.kl_rep_raw = g.mean(kl_rep_bt);
  return out;
}

WmStepMetrics WorldModel::train_step(const SequenceBatchView& batch, Rng& rng,
                                     PosteriorBundle* posterior) {
  WmStepMetrics m;
  Graph g;
  Var obs = g.constant(batch.obs.cast(cfg_.dtype));
  Encoded enc = encode(g, obs, rng);
  Var actions = g.constant(batch.actions.cast(cfg_.dtype));
  SeqOut seq = sequence_forward(g, actions, enc.z, batch.is_first);
  Heads heads = heads_forward(g, enc.z, seq.h);
  LossOut lo = loss(g, batch, enc, seq, heads);

  if (!g.value(lo.total).all_finite()) {
    m.skipped = true;
    return m;
  }
  m.loss = g.value(lo.total).item();
  m.loss_obs = g.value(lo.nll_obs).item();
  m.loss_reward = g.value(lo.nll_reward).item();
  m.loss_cont = g.value(lo.nll_cont).item();
  m.kl_dyn = g.value(lo.kl_dyn_raw).item();
  m.kl_rep = g.value(lo.kl_rep_raw).item();

  g.backward(lo.total);
  m.grad_norm = opt_->step(g.grads_for(params_));

  if (posterior) {
    posterior->z = g.value(enc.z);
    posterior->h = g.value(seq.h);
    posterior->x.clear();
    for (const auto& st : seq.states)
      posterior->x.push_back({g.value(st.re), g.value(st.im)});
  }
  return m;
}

}  // namespace sswm::wm

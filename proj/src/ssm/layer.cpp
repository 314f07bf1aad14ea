#include "sswm/ssm/layer.hpp"

#include <cmath>

namespace sswm::ssm {

using numkit::ComplexPair;
using numkit::Dtype;
using numkit::Graph;
using numkit::ParamStore;
using numkit::Rng;
using numkit::Shape;
using numkit::Tensor;
using numkit::Var;
using numkit::shape_str;
using numkit::shapes_equal;

SsmLayer::SsmLayer(ParamStore& store, const std::string& prefix, const SsmLayerConfig& cfg,
                   uint64_t seed, Dtype dt)
    : store_(&store), cfg_(cfg), dt_(dt) {
  ssm_ = init_hippo_diag(store, prefix + ".ssm", cfg, seed, dt);
  Rng rng(numkit::split_seed(seed, 101));
  const int64_t h = cfg.io_size, u = cfg.glu_units;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(h));
  const double s_gate = 1.0 / std::sqrt(static_cast<double>(u));
  glu_w1_ = store.add(prefix + ".glu.w1", rng.normal_tensor({h, u}, 0, s_in, dt));
  glu_b1_ = store.add(prefix + ".glu.b1", Tensor::zeros({u}, dt));
  glu_w2_ = store.add(prefix + ".glu.w2", rng.normal_tensor({h, u}, 0, s_in, dt));
  glu_b2_ = store.add(prefix + ".glu.b2", Tensor::zeros({u}, dt));
  glu_wo_ = store.add(prefix + ".glu.wo", rng.normal_tensor({u, h}, 0, s_gate, dt));
  glu_bo_ = store.add(prefix + ".glu.bo", Tensor::zeros({h}, dt));
  ln_scale_ = store.add(prefix + ".ln.scale", Tensor::full({h}, 1.0, dt));
  ln_bias_ = store.add(prefix + ".ln.bias", Tensor::zeros({h}, dt));
}

DiscreteSsmVars SsmLayer::discretize(Graph& g) const {
  ComplexPair a{g.param(*store_, ssm_.a_re), g.param(*store_, ssm_.a_im)};
  ComplexPair b{g.param(*store_, ssm_.b_re), g.param(*store_, ssm_.b_im)};
  Var delta = g.exp(g.param(*store_, ssm_.log_delta));  // [N]
  Var half = g.constant_like(0.5, delta);
  Var da2_re = g.mul(g.mul(a.re, delta), half);
  Var da2_im = g.mul(g.mul(a.im, delta), half);
  Var one = g.constant_like(1.0, delta);
  ComplexPair num{g.add(one, da2_re), da2_im};
  ComplexPair den{g.sub(one, da2_re), g.neg(da2_im)};

  // singular bilinear transform: delta * a == 2 for some entry
  {
    const Tensor& dr = g.value(den.re);
    const Tensor& di = g.value(den.im);
    for (int64_t i = 0; i < dr.numel(); ++i) {
      const double m = dr.at(i) * dr.at(i) + di.at(i) * di.at(i);
      if (m < 1e-12)
        numkit::fail("discretize: singular denominator (delta*a == 2) at state entry " +
                     std::to_string(i));
    }
  }

  DiscreteSsmVars out;
  out.a_bar = cdiv(g, num, den);
  // row scale s_n = delta_n / (1 - delta_n a_n / 2), applied to B rows
  ComplexPair s = cdiv(g, ComplexPair{delta, g.constant_like(0.0, delta)}, den);
  const int64_t n = g.shape(s.re)[0];
  ComplexPair s_col{g.reshape(s.re, {n, 1}), g.reshape(s.im, {n, 1})};
  out.b_bar = cmul(g, s_col, b);
  out.c = {g.param(*store_, ssm_.c_re), g.param(*store_, ssm_.c_im)};
  out.d = g.param(*store_, ssm_.d);
  return out;
}

SsmApplyOut SsmLayer::apply_ssm(Graph& g, const DiscreteSsmVars& disc, Var u,
                                const Tensor& is_first, const LayerStateT* x0) const {
  const Shape& us = g.shape(u);
  if (us.size() != 3 || us[2] != cfg_.io_size)
    numkit::fail("ssm: input must be [B,T," + std::to_string(cfg_.io_size) + "], got " +
                 shape_str(us));
  const int64_t B = us[0], T = us[1], N = cfg_.state_size, H = cfg_.io_size;
  if (!shapes_equal(is_first.shape(), Shape{B, T}))
    numkit::fail("ssm: is_first shape " + shape_str(is_first.shape()) + " does not match input " +
                 shape_str(us));

  // done at position t resets the state entering t+1, so element dones are the
  // is_first flags shifted left by one; the t=0 flag masks the incoming state.
  Tensor dones({B, T}, dt_);
  Tensor r1({B, 1}, dt_);
  Tensor r_interior({B, T, 1}, dt_);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t t = 0; t + 1 < T; ++t) dones.set(b * T + t, is_first.at(b * T + t + 1));
    dones.set(b * T + T - 1, 0.0);
    r1.set(b, is_first.at(b * T));
    for (int64_t t = 1; t < T; ++t) r_interior.set((b * T + t), is_first.at(b * T + t));
  }

  // episode-start state: zeros or a learnable vector
  ComplexPair start{Var{}, Var{}};
  const bool learnable = cfg_.learnable_start;
  if (learnable)
    start = {g.param(*store_, ssm_.start_re), g.param(*store_, ssm_.start_im)};

  ComplexPair x0v{Var{}, Var{}};
  if (x0) {
    Var keep = g.sub(g.constant_like(1.0, u), g.constant(r1.cast(dt_)));  // [B,1]
    Var rst = g.constant(r1.cast(dt_));
    x0v = {g.mul(g.constant(x0->first), keep), g.mul(g.constant(x0->second), keep)};
    if (learnable) {
      x0v = {g.add(x0v.re, g.mul(rst, g.reshape(start.re, {1, N}))),
             g.add(x0v.im, g.mul(rst, g.reshape(start.im, {1, N})))};
    }
  } else {
    if (learnable) {
      Var onesB = g.constant(Tensor::full({B, 1}, 1.0, dt_));
      x0v = {g.mul(onesB, g.reshape(start.re, {1, N})),
             g.mul(onesB, g.reshape(start.im, {1, N}))};
    } else {
      x0v = {g.constant(Tensor::zeros({B, N}, dt_)), g.constant(Tensor::zeros({B, N}, dt_))};
    }
  }

  // bu_t = B_bar u_t
  Var u_flat = g.reshape(u, {B * T, H});
  Var bu_re = g.reshape(g.matmul(u_flat, g.transpose2d(disc.b_bar.re)), {B, T, N});
  Var bu_im = g.reshape(g.matmul(u_flat, g.transpose2d(disc.b_bar.im)), {B, T, N});
  if (learnable) {
    // interior resets re-enter through a_bar * start instead of zero
    ComplexPair as = cmul(g, disc.a_bar, start);  // [N]
    Var mask = g.constant(r_interior.cast(dt_));  // [B,T,1]
    bu_re = g.add(bu_re, g.mul(mask, g.reshape(as.re, {1, 1, N})));
    bu_im = g.add(bu_im, g.mul(mask, g.reshape(as.im, {1, 1, N})));
  }

  ScanVars xs = diag_scan(g, disc.a_bar.re, disc.a_bar.im, bu_re, bu_im, x0v.re, x0v.im, dones);

  // y = 2 Re(C x) + D u
  Var xr_flat = g.reshape(xs.re, {B * T, N});
  Var xi_flat = g.reshape(xs.im, {B * T, N});
  Var cx = g.sub(g.matmul(xr_flat, g.transpose2d(disc.c.re)),
                 g.matmul(xi_flat, g.transpose2d(disc.c.im)));
  Var y = g.add(g.mul(cx, g.constant_like(2.0, cx)), g.mul(u_flat, disc.d));

  SsmApplyOut out;
  out.y = g.reshape(y, {B, T, H});
  out.states = {xs.re, xs.im};
  out.last = {g.reshape(g.slice(xs.re, 1, T - 1, 1), {B, N}),
              g.reshape(g.slice(xs.im, 1, T - 1, 1), {B, N})};
  return out;
}

SsmLayer::Output SsmLayer::forward(Graph& g, Var u, const Tensor& is_first,
                                   const LayerStateT* x0) const {
  DiscreteSsmVars disc = discretize(g);
  SsmApplyOut core = apply_ssm(g, disc, u, is_first, x0);
  const Shape& us = g.shape(u);
  const int64_t B = us[0], T = us[1], H = us[2];

  Var v = g.reshape(core.y, {B * T, H});
  Var ga = g.gelu(v);
  Var h1 = g.add(g.matmul(ga, g.param(*store_, glu_w1_)), g.param(*store_, glu_b1_));
  Var h2 = g.add(g.matmul(ga, g.param(*store_, glu_w2_)), g.param(*store_, glu_b2_));
  Var gated = g.mul(h1, g.sigmoid(h2));
  Var w = g.add(g.matmul(gated, g.param(*store_, glu_wo_)), g.param(*store_, glu_bo_));
  Var res = g.add(g.reshape(u, {B * T, H}), w);
  Var ln = g.layer_norm(res);
  Var y = g.add(g.mul(ln, g.param(*store_, ln_scale_)), g.param(*store_, ln_bias_));

  return {g.reshape(y, {B, T, H}), core.states, core.last};
}

SsmStack::SsmStack(ParamStore& store, const std::string& prefix, int64_t n_layers,
                   const SsmLayerConfig& cfg, uint64_t seed, Dtype dt) {
  if (n_layers < 1) numkit::fail("ssm stack: need at least one layer");
  for (int64_t i = 0; i < n_layers; ++i)
    layers_.emplace_back(store, prefix + ".layer" + std::to_string(i), cfg,
                         numkit::split_seed(seed, static_cast<uint64_t>(i)), dt);
}

SsmStack::Output SsmStack::forward(Graph& g, Var u, const Tensor& is_first,
                                   std::span<const LayerStateT> x0, Mode mode) const {
  const Shape& us = g.shape(u);
  if (mode == Mode::Recurrent && us[1] != 1)
    numkit::fail("ssm stack: recurrent mode requires sequence length 1, got " +
                 std::to_string(us[1]));
  if (!x0.empty() && static_cast<int64_t>(x0.size()) != n_layers())
    numkit::fail("ssm stack: expected one state per layer");

  Output out;
  Var h = u;
  for (size_t i = 0; i < layers_.size(); ++i) {
    const LayerStateT* st = x0.empty() ? nullptr : &x0[i];
    SsmLayer::Output lo = layers_[i].forward(g, h, is_first, st);
    h = lo.y;
    out.states.push_back(lo.states);
    out.last.push_back(lo.last);
  }
  out.h = h;
  return out;
}

}  // namespace sswm::ssm

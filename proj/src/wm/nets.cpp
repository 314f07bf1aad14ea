#include "sswm/wm/nets.hpp"

#include <cmath>

namespace sswm::wm {

using numkit::Dtype;
using numkit::Graph;
using numkit::ParamStore;
using numkit::Rng;
using numkit::Tensor;
using numkit::Var;

Linear::Linear(ParamStore& store, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
               Dtype dt, double scale)
    : store_(&store), in_(in), out_(out) {
  const double std = scale / std::sqrt(static_cast<double>(in));
  w_ = store.add(prefix + ".w", rng.normal_tensor({in, out}, 0.0, std, dt));
  b_ = store.add(prefix + ".b", Tensor::zeros({out}, dt));
}

Var Linear::operator()(Graph& g, Var x) const {
  return g.add(g.matmul(x, g.param(*store_, w_)), g.param(*store_, b_));
}

Mlp::Mlp(ParamStore& store, const std::string& prefix, int64_t in, int64_t hidden,
         int64_t n_hidden, int64_t out, Rng& rng, Dtype dt, double out_scale)
    : store_(&store) {
  int64_t cur = in;
  for (int64_t i = 0; i < n_hidden; ++i) {
    Block b;
    b.lin = Linear(store, prefix + ".h" + std::to_string(i), cur, hidden, rng, dt);
    b.ln_scale = store.add(prefix + ".h" + std::to_string(i) + ".ln.scale",
                           Tensor::full({hidden}, 1.0, dt));
    b.ln_bias = store.add(prefix + ".h" + std::to_string(i) + ".ln.bias",
                          Tensor::zeros({hidden}, dt));
    blocks_.push_back(b);
    cur = hidden;
  }
  out_ = Linear(store, prefix + ".out", cur, out, rng, dt, out_scale);
}

Var Mlp::operator()(Graph& g, Var x) const {
  Var h = x;
  for (const Block& b : blocks_) {
    Var lin = b.lin(g, h);
    Var ln = g.layer_norm(lin);
    Var aff = g.add(g.mul(ln, g.param(*store_, b.ln_scale)), g.param(*store_, b.ln_bias));
    h = g.silu(aff);
  }
  return out_(g, h);
}

}  // namespace sswm::wm

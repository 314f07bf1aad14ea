#pragma once

#include <string>

#include "sswm/numkit/graph.hpp"
#include "sswm/numkit/rng.hpp"

namespace sswm::wm {

class Linear {
 public:
  Linear() = default;
  Linear(numkit::ParamStore& store, const std::string& prefix, int64_t in, int64_t out,
         numkit::Rng& rng, numkit::Dtype dt, double scale = 1.0);
  numkit::Var operator()(numkit::Graph& g, numkit::Var x) const;
  int64_t in_dim() const { return in_; }
  int64_t out_dim() const { return out_; }

 private:
  const numkit::ParamStore* store_ = nullptr;
  numkit::ParamId w_ = -1, b_ = -1;
  int64_t in_ = 0, out_ = 0;
};

// Dense -> LayerNorm (affine) -> SiLU blocks with a plain linear output layer.
class Mlp {
 public:
  Mlp() = default;
  Mlp(numkit::ParamStore& store, const std::string& prefix, int64_t in, int64_t hidden,
      int64_t n_hidden, int64_t out, numkit::Rng& rng, numkit::Dtype dt,
      double out_scale = 1.0);
  numkit::Var operator()(numkit::Graph& g, numkit::Var x) const;

 private:
  const numkit::ParamStore* store_ = nullptr;
  struct Block {
    Linear lin;
    numkit::ParamId ln_scale, ln_bias;
  };
  std::vector<Block> blocks_;
  Linear out_;
};

}  // namespace sswm::wm

#pragma once

#include <cstdint>
#include <vector>

#include "sswm/numkit/graph.hpp"

namespace sswm::numkit {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 0.0;  // global-norm clip; 0 disables
};

class Adam {
 public:
  Adam(ParamStore& store, AdamConfig cfg);

  // Applies one update. Returns the pre-clip global gradient norm.
  double step(const GradRecord& grads);

  int64_t steps() const { return t_; }
  const std::vector<Tensor>& m() const { return m_; }
  const std::vector<Tensor>& v() const { return v_; }
  void restore(std::vector<Tensor> m, std::vector<Tensor> v, int64_t t);
  const AdamConfig& config() const { return cfg_; }

 private:
  ParamStore& store_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

}  // namespace sswm::numkit

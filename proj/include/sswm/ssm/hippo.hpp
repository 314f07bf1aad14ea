#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "sswm/numkit/graph.hpp"
#include "sswm/numkit/rng.hpp"

namespace sswm::ssm {

struct SsmLayerConfig {
  int64_t state_size = 512;  // N, per-layer hidden size
  int64_t io_size = 512;     // H, layer input/output width
  int64_t hippo_blocks = 8;
  double delta_min = 1e-3;
  double delta_max = 1e-1;
  int64_t glu_units = 1024;  // width of the gated transformation
  bool learnable_start = false;
};

// Eigenvalues of the normal part of the HiPPO-LegS matrix of size m,
// sorted by imaginary part (deterministic). All real parts are -1/2.
std::vector<std::complex<double>> hippo_normal_spectrum(int64_t m);

// Continuous-time diagonal parameters of one MIMO layer, registered in `store`.
struct ContinuousSsmParams {
  numkit::ParamId a_re, a_im;          // [N]
  numkit::ParamId b_re, b_im;          // [N,H]
  numkit::ParamId c_re, c_im;          // [H,N]
  numkit::ParamId d;                   // [H]
  numkit::ParamId log_delta;           // [N]
  numkit::ParamId start_re, start_im;  // [N], only when learnable_start
};

// A_diag is the block-repeated spectrum of the size-(N/blocks) HiPPO normal part;
// B and C are random with unit-variance columns; log_delta is log-uniform in
// [delta_min, delta_max]. Rejects N not divisible by hippo_blocks.
ContinuousSsmParams init_hippo_diag(numkit::ParamStore& store, const std::string& prefix,
                                    const SsmLayerConfig& cfg, uint64_t seed, numkit::Dtype dt);

}  // namespace sswm::ssm

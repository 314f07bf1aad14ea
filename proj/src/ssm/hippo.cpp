#include "sswm/ssm/hippo.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace sswm::ssm {

using numkit::Dtype;
using numkit::ParamStore;
using numkit::Rng;
using numkit::Tensor;

std::vector<std::complex<double>> hippo_normal_spectrum(int64_t m) {
  // Normal part of HiPPO-LegS: -1/2 I + S with S skew-symmetric,
  // S_{nk} = -(1/2) sqrt((2n+1)(2k+1)) for n > k. iS is Hermitian, so its
  // eigenvalues are real and a self-adjoint solver applies.
  Eigen::MatrixXcd h(m, m);
  for (int64_t n = 0; n < m; ++n)
    for (int64_t k = 0; k < m; ++k) {
      double s = 0.0;
      if (n > k)
        s = -0.5 * std::sqrt(static_cast<double>((2 * n + 1) * (2 * k + 1)));
      else if (n < k)
        s = 0.5 * std::sqrt(static_cast<double>((2 * n + 1) * (2 * k + 1)));
      h(n, k) = std::complex<double>(0.0, s);
    }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(h);
  std::vector<std::complex<double>> eig(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    // S has eigenvalue -i*w for each real eigenvalue w of iS
    eig[static_cast<size_t>(i)] = std::complex<double>(-0.5, -es.eigenvalues()(i));
  }
  std::sort(eig.begin(), eig.end(),
            [](const auto& a, const auto& b) { return a.imag() < b.imag(); });
  return eig;
}

ContinuousSsmParams init_hippo_diag(ParamStore& store, const std::string& prefix,
                                    const SsmLayerConfig& cfg, uint64_t seed, Dtype dt) {
  const int64_t n = cfg.state_size, h = cfg.io_size;
  if (cfg.hippo_blocks <= 0 || n % cfg.hippo_blocks != 0)
    numkit::fail("ssm init: state size " + std::to_string(n) + " not divisible by " +
                 std::to_string(cfg.hippo_blocks) + " blocks");
  if (!(cfg.delta_min > 0.0 && cfg.delta_min < cfg.delta_max))
    numkit::fail("ssm init: need 0 < delta_min < delta_max");

  const int64_t block = n / cfg.hippo_blocks;
  const auto spectrum = hippo_normal_spectrum(block);

  Tensor a_re({n}, dt), a_im({n}, dt);
  for (int64_t b = 0; b < cfg.hippo_blocks; ++b)
    for (int64_t k = 0; k < block; ++k) {
      a_re.set(b * block + k, spectrum[static_cast<size_t>(k)].real());
      a_im.set(b * block + k, spectrum[static_cast<size_t>(k)].imag());
    }

  Rng rng(seed);
  // unit-variance columns: per-entry complex variance 1/rows, split across re/im
  const double b_std = 1.0 / std::sqrt(2.0 * static_cast<double>(n));
  const double c_std = 1.0 / std::sqrt(2.0 * static_cast<double>(h));
  Tensor b_re = rng.normal_tensor({n, h}, 0.0, b_std, dt);
  Tensor b_im = rng.normal_tensor({n, h}, 0.0, b_std, dt);
  Tensor c_re = rng.normal_tensor({h, n}, 0.0, c_std, dt);
  Tensor c_im = rng.normal_tensor({h, n}, 0.0, c_std, dt);
  Tensor d = rng.normal_tensor({h}, 0.0, 1.0, dt);
  Tensor log_delta({n}, dt);
  for (int64_t i = 0; i < n; ++i)
    log_delta.set(i, rng.uniform(std::log(cfg.delta_min), std::log(cfg.delta_max)));

  ContinuousSsmParams p;
  p.a_re = store.add(prefix + ".a_re", a_re);
  p.a_im = store.add(prefix + ".a_im", a_im);
  p.b_re = store.add(prefix + ".b_re", b_re);
  p.b_im = store.add(prefix + ".b_im", b_im);
  p.c_re = store.add(prefix + ".c_re", c_re);
  p.c_im = store.add(prefix + ".c_im", c_im);
  p.d = store.add(prefix + ".d", d);
  p.log_delta = store.add(prefix + ".log_delta", log_delta);
  p.start_re = p.start_im = -1;
  if (cfg.learnable_start) {
    p.start_re = store.add(prefix + ".start_re", Tensor::zeros({n}, dt));
    p.start_im = store.add(prefix + ".start_im", Tensor::zeros({n}, dt));
  }
  return p;
}

}  // namespace sswm::ssm

#include "sswm/numkit/optim.hpp"

#include <cmath>

namespace sswm::numkit {

Adam::Adam(ParamStore& store, AdamConfig cfg) : store_(store), cfg_(cfg) {
  for (size_t i = 0; i < store.size(); ++i) {
    const Tensor& v = store.value(static_cast<ParamId>(i));
    m_.push_back(Tensor::zeros(v.shape(), v.dtype()));
    v_.push_back(Tensor::zeros(v.shape(), v.dtype()));
  }
}

double Adam::step(const GradRecord& grads) {
  if (grads.grads.size() != store_.size()) fail("adam: gradient record does not match store");
  const double norm = std::sqrt(grads.sq_norm());
  double scale = 1.0;
  if (cfg_.clip > 0.0 && norm > cfg_.clip) scale = cfg_.clip / norm;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < store_.size(); ++i) {
    Tensor& p = store_.value(static_cast<ParamId>(i));
    const Tensor& g = grads.grads[i];
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pp = p.data<T>();
      auto pg = g.data<T>();
      auto pm = m_[i].data<T>();
      auto pv = v_[i].data<T>();
      for (size_t k = 0; k < pp.size(); ++k) {
        const double gv = static_cast<double>(pg[k]) * scale;
        const double m = cfg_.beta1 * static_cast<double>(pm[k]) + (1.0 - cfg_.beta1) * gv;
        const double v = cfg_.beta2 * static_cast<double>(pv[k]) + (1.0 - cfg_.beta2) * gv * gv;
        pm[k] = static_cast<T>(m);
        pv[k] = static_cast<T>(v);
        const double mh = m / bc1;
        const double vh = v / bc2;
        pp[k] = static_cast<T>(static_cast<double>(pp[k]) - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    });
  }
  return norm;
}

void Adam::restore(std::vector<Tensor> m, std::vector<Tensor> v, int64_t t) {
  if (m.size() != store_.size() || v.size() != store_.size())
    fail("adam: restore size mismatch");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

}  // namespace sswm::numkit

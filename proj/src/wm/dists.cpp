#include "sswm/wm/dists.hpp"

#include <algorithm>

namespace sswm::wm {

using numkit::Dtype;
using numkit::Shape;
using numkit::Tensor;

TwoHot::TwoHot(int64_t bins, double lo, double hi) {
  if (bins < 2) numkit::fail("twohot: need at least 2 bins");
  centers_.resize(static_cast<size_t>(bins));
  const double a = symlog(lo), b = symlog(hi);
  for (int64_t i = 0; i < bins; ++i)
    centers_[static_cast<size_t>(i)] =
        a + (b - a) * static_cast<double>(i) / static_cast<double>(bins - 1);
}

void TwoHot::encode_row(double value, std::span<double> out) const {
  const int64_t k = bins();
  std::fill(out.begin(), out.end(), 0.0);
  const double v = std::clamp(symlog(value), centers_.front(), centers_.back());
  // index of the left neighbor
  const auto it = std::upper_bound(centers_.begin(), centers_.end(), v);
  int64_t hi = std::clamp<int64_t>(it - centers_.begin(), 1, k - 1);
  int64_t lo = hi - 1;
  const double span = centers_[static_cast<size_t>(hi)] - centers_[static_cast<size_t>(lo)];
  const double w_hi = (v - centers_[static_cast<size_t>(lo)]) / span;
  out[static_cast<size_t>(lo)] = 1.0 - w_hi;
  out[static_cast<size_t>(hi)] = w_hi;
}

Tensor TwoHot::encode(const Tensor& values, Dtype dt) const {
  Shape out_shape = values.shape();
  out_shape.push_back(bins());
  Tensor out(out_shape, dt);
  std::vector<double> row(static_cast<size_t>(bins()));
  for (int64_t i = 0; i < values.numel(); ++i) {
    encode_row(values.at(i), row);
    for (int64_t j = 0; j < bins(); ++j) out.set(i * bins() + j, row[static_cast<size_t>(j)]);
  }
  return out;
}

double TwoHot::decode_row(std::span<const double> probs) const {
  double m = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) m += probs[i] * centers_[i];
  return symexp(m);
}

Tensor TwoHot::decode(const Tensor& probs) const {
  const int64_t k = bins();
  if (probs.shape().empty() || probs.shape().back() != k)
    numkit::fail("twohot decode: last axis must have " + std::to_string(k) + " bins");
  Shape out_shape(probs.shape().begin(), probs.shape().end() - 1);
  Tensor out(out_shape, probs.dtype());
  const int64_t rows = probs.numel() / k;
  std::vector<double> row(static_cast<size_t>(k));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < k; ++j) row[static_cast<size_t>(j)] = probs.at(r * k + j);
    out.set(r, decode_row(row));
  }
  return out;
}

}  // namespace sswm::wm

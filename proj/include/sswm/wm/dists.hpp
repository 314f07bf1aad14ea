#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "sswm/numkit/tensor.hpp"

namespace sswm::wm {

inline double symlog(double v) { return v >= 0 ? std::log1p(v) : -std::log1p(-v); }
inline double symexp(double v) { return v >= 0 ? std::expm1(v) : -std::expm1(-v); }

// Scalar targets as weights on the two neighboring bins of a fixed grid;
// bins are uniform in symlog space over [-20, 20].
class TwoHot {
 public:
  explicit TwoHot(int64_t bins = 255, double lo = -20.0, double hi = 20.0);

  int64_t bins() const { return static_cast<int64_t>(centers_.size()); }
  // bin centers in symlog space
  const std::vector<double>& centers() const { return centers_; }

  // values [..] -> weights [..., bins]; the value is symlog-transformed first
  numkit::Tensor encode(const numkit::Tensor& values, numkit::Dtype dt) const;
  void encode_row(double value, std::span<double> out) const;

  // expected value under probs, mapped back through symexp
  double decode_row(std::span<const double> probs) const;
  // probs [..., bins] -> values [..]
  numkit::Tensor decode(const numkit::Tensor& probs) const;

 private:
  std::vector<double> centers_;
};

}  // namespace sswm::wm

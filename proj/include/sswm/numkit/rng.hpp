#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>

#include "sswm/numkit/tensor.hpp"

namespace sswm::numkit {

// splitmix64; used to derive independent subsystem seeds from one master seed.
inline uint64_t split_seed(uint64_t master, uint64_t stream) {
  uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// mt19937_64 with explicit, implementation-independent sample transforms.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int64_t uniform_int(int64_t n) {  // [0, n)
    // rejection sampling for exact uniformity
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  int64_t categorical(std::span<const double> probs) {
    double u = uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int64_t>(i);
    }
    return static_cast<int64_t>(probs.size()) - 1;
  }

  Tensor normal_tensor(Shape shape, double mean, double stddev, Dtype dt) {
    Tensor t(std::move(shape), dt);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, mean + stddev * normal());
    return t;
  }

  Tensor uniform_tensor(Shape shape, double lo, double hi, Dtype dt) {
    Tensor t(std::move(shape), dt);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, uniform(lo, hi));
    return t;
  }

  std::string state() const {
    std::ostringstream os;
    os << gen_ << " " << (has_spare_ ? 1 : 0) << " " << spare_;
    return os.str();
  }

  void restore(const std::string& s) {
    std::istringstream is(s);
    int spare_flag = 0;
    is >> gen_ >> spare_flag >> spare_;
    has_spare_ = spare_flag != 0;
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sswm::numkit

#include "sswm/numkit/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sswm::numkit {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

void fail(const std::string& msg) { throw std::runtime_error(msg); }

Tensor::Tensor(Shape shape, Dtype dt) : shape_(std::move(shape)), dtype_(dt) {
  for (int64_t d : shape_)
    if (d < 0) fail("tensor: negative dimension in " + shape_str(shape_));
  const size_t n = static_cast<size_t>(shape_numel(shape_));
  if (dt == Dtype::F32)
    buf_ = std::vector<float>(n, 0.0f);
  else
    buf_ = std::vector<double>(n, 0.0);
}

Tensor Tensor::zeros(Shape shape, Dtype dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
  Tensor t(std::move(shape), dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.data<T>()) v = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({}, value, dt); }

Tensor Tensor::from(Shape shape, std::span<const double> values, Dtype dt) {
  Tensor t(std::move(shape), dt);
  if (static_cast<int64_t>(values.size()) != t.numel())
    fail("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(t.shape()));
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    for (size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, Dtype dt) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dt);
}

double Tensor::at(int64_t i) const {
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[static_cast<size_t>(i)]);
  });
}

void Tensor::set(int64_t i, double value) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    data<T>()[static_cast<size_t>(i)] = static_cast<T>(value);
  });
}

double Tensor::item() const {
  if (numel() != 1) fail("item() on tensor of shape " + shape_str(shape_));
  return at(0);
}

Tensor Tensor::cast(Dtype dt) const {
  if (dt == dtype_) return *this;
  Tensor out(shape_, dt);
  for (int64_t i = 0; i < numel(); ++i) out.set(i, at(i));
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel())
    fail("reshape: " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> v(static_cast<size_t>(numel()));
  for (int64_t i = 0; i < numel(); ++i) v[static_cast<size_t>(i)] = at(i);
  return v;
}

bool Tensor::all_finite() const {
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    for (T v : data<T>())
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  });
}

}  // namespace sswm::numkit

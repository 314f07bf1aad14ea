#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace sswm::numkit {

enum class Dtype : uint8_t { F32, F64 };

inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shapes_equal(const Shape& a, const Shape& b);

[[noreturn]] void fail(const std::string& msg);

// Dense row-major array. Storage matches dtype; no implicit conversions.
// A default-constructed tensor is empty (shape [0]); scalars have shape [].
class Tensor {
 public:
  Tensor() : shape_{0}, dtype_(Dtype::F32) {}
  Tensor(Shape shape, Dtype dt);

  static Tensor zeros(Shape shape, Dtype dt = Dtype::F32);
  static Tensor full(Shape shape, double value, Dtype dt = Dtype::F32);
  static Tensor scalar(double value, Dtype dt = Dtype::F32);
  static Tensor from(Shape shape, std::span<const double> values, Dtype dt = Dtype::F64);
  static Tensor from(Shape shape, std::initializer_list<double> values, Dtype dt = Dtype::F64);

  const Shape& shape() const { return shape_; }
  Dtype dtype() const { return dtype_; }
  int64_t numel() const { return shape_numel(shape_); }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }

  template <typename T>
  std::span<T> data() {
    return std::span<T>(std::get<std::vector<T>>(buf_));
  }
  template <typename T>
  std::span<const T> data() const {
    return std::span<const T>(std::get<std::vector<T>>(buf_));
  }

  double at(int64_t flat_index) const;
  void set(int64_t flat_index, double value);
  double item() const;  // requires numel()==1

  Tensor cast(Dtype dt) const;
  Tensor reshaped(Shape shape) const;  // same numel, shared nothing (copy)
  std::vector<double> to_vector() const;

  bool all_finite() const;

 private:
  Shape shape_;
  Dtype dtype_;
  std::variant<std::vector<float>, std::vector<double>> buf_;
};

// Invokes f with a type tag for the active scalar type.
template <typename F>
decltype(auto) dispatch(Dtype dt, F&& f) {
  if (dt == Dtype::F32) return f(float{});
  return f(double{});
}

}  // namespace sswm::numkit

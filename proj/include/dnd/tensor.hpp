#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dnd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. `grad` is empty when no gradient has
/// been accumulated, otherwise it has the same length as `data`.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t numel() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool has_grad() const noexcept { return !grad.empty(); }
  void zero_grad() { grad.clear(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double item() const;

  std::span<double> values() noexcept { return data; }
  std::span<const double> values() const noexcept { return data; }

  /// Same data, new shape; throws DimensionError if the sizes differ.
  Tensor reshaped(Shape s) const;

  bool operator==(const Tensor& other) const { return shape == other.shape && data == other.data; }
};

// Non-differentiable helpers used outside the tape.
Tensor clamp01(Tensor t);
bool all_finite(std::span<const double> v);
double linf_distance(const Tensor& a, const Tensor& b);
double l2_distance(const Tensor& a, const Tensor& b);
double mse_between(const Tensor& a, const Tensor& b);
std::size_t argmax(std::span<const double> v);

/// Stack equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);
/// Row `i` of a tensor with a leading batch axis.
Tensor unstack_row(const Tensor& batch, std::size_t i);

}  // namespace dnd

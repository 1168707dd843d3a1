#include "dnd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dnd/errors.hpp"

namespace dnd {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(values));
}

double Tensor::item() const {
  if (data.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape));
  return data[0];
}

Tensor Tensor::reshaped(Shape s) const {
  if (shape_numel(s) != data.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape) + " to " + shape_string(s));
  }
  return Tensor(std::move(s), data);
}

Tensor clamp01(Tensor t) {
  for (double& v : t.data) v = std::clamp(v, 0.0, 1.0);
  return t;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

namespace {
void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(what) + ": shapes " + shape_string(a.shape) + " and " +
                         shape_string(b.shape) + " differ");
  }
}
}  // namespace

double linf_distance(const Tensor& a, const Tensor& b) {
  require_same(a, b, "linf_distance");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double l2_distance(const Tensor& a, const Tensor& b) {
  require_same(a, b, "l2_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double mse_between(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mse_between");
  if (a.numel() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw DimensionError("stack of zero tensors");
  const Shape& inner = items.front().shape;
  Shape outer{items.size()};
  outer.insert(outer.end(), inner.begin(), inner.end());
  std::vector<double> values;
  values.reserve(items.size() * items.front().numel());
  for (const auto& t : items) {
    if (t.shape != inner) {
      throw DimensionError("stack: shape " + shape_string(t.shape) + " vs " + shape_string(inner));
    }
    values.insert(values.end(), t.data.begin(), t.data.end());
  }
  return Tensor(std::move(outer), std::move(values));
}

Tensor unstack_row(const Tensor& batch, std::size_t i) {
  if (batch.rank() < 1 || i >= batch.dim(0)) throw DimensionError("unstack_row index out of range");
  Shape inner(batch.shape.begin() + 1, batch.shape.end());
  if (inner.empty()) inner = {1};
  const std::size_t n = shape_numel(inner);
  return Tensor(std::move(inner),
                std::vector<double>(batch.data.begin() + static_cast<std::ptrdiff_t>(i * n),
                                    batch.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)));
}

}  // namespace dnd

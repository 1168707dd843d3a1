#include "dnd/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "dnd/errors.hpp"

namespace dnd {

namespace {

constexpr double kLogGuard = 1e-12;

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

// Gradient buffer of `id`, or nullptr when that node does not need one.
double* grad_of(Tape& t, std::size_t id) {
  return t.requires_grad(id) ? t.grad(id).data() : nullptr;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::param(Tensor& t) {
  Node n;
  n.external = &t;
  n.sink = &t;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant_ref(const Tensor& t) {
  Node n;
  n.external = &t;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::input(Tensor t, bool requires_grad) {
  Node n;
  t.grad.clear();
  n.value = std::move(t);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                [this](std::size_t p) { return nodes_[p].requires_grad; });
  if (n.requires_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.value;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss is not on this tape");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  for (std::size_t i = 0; i <= loss.id; ++i) {
    Node& n = nodes_[i];
    if (n.requires_grad) {
      n.grad.assign(value(i).numel(), 0.0);
    } else {
      n.grad.clear();
    }
  }
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward(*this, i);
  }
  for (std::size_t i = 0; i <= loss.id; ++i) {
    Node& n = nodes_[i];
    if (!n.sink) continue;
    std::vector<double>& g = n.sink->grad;
    if (g.empty()) g.assign(n.grad.size(), 0.0);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
  }
}

namespace {

// Row-blocked kernels: four rows of the left operand share each streamed row
// of the right operand. All accumulate into the output.
constexpr std::size_t kRowBlock = 4;

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + kRowBlock <= m; i += kRowBlock) {
    double* c0 = C + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = A[i * k + p], a1 = A[(i + 1) * k + p], a2 = A[(i + 2) * k + p], a3 = A[(i + 3) * k + p];
      if (a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0) continue;
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        c0[j] += a0 * b[j];
        c1[j] += a1 * b[j];
        c2[j] += a2 * b[j];
        c3[j] += a3 * b[j];
      }
    }
  }
  for (; i < m; ++i) {
    double* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
void gemm_nt(const double* dC, const double* B, double* dA, std::size_t m, std::size_t n, std::size_t k) {
  std::size_t i = 0;
  for (; i + kRowBlock <= m; i += kRowBlock) {
    const double* g0 = dC + i * n;
    const double* g1 = g0 + n;
    const double* g2 = g1 + n;
    const double* g3 = g2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        s0 += g0[j] * b[j];
        s1 += g1[j] * b[j];
        s2 += g2[j] * b[j];
        s3 += g3[j] * b[j];
      }
      dA[i * k + p] += s0;
      dA[(i + 1) * k + p] += s1;
      dA[(i + 2) * k + p] += s2;
      dA[(i + 3) * k + p] += s3;
    }
  }
  for (; i < m; ++i) {
    const double* g = dC + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[j] * b[j];
      dA[i * k + p] += s;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
void gemm_tn(const double* A, const double* dC, double* dB, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + kRowBlock <= m; i += kRowBlock) {
    const double* g0 = dC + i * n;
    const double* g1 = g0 + n;
    const double* g2 = g1 + n;
    const double* g3 = g2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = A[i * k + p], a1 = A[(i + 1) * k + p], a2 = A[(i + 2) * k + p], a3 = A[(i + 3) * k + p];
      if (a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0) continue;
      double* d = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += a0 * g0[j] + a1 * g1[j] + a2 * g2[j] + a3 * g3[j];
    }
  }
  for (; i < m; ++i) {
    const double* g = dC + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      double* d = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += av * g[j];
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(A.shape) + " by " +
                         shape_string(B.shape));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C({m, n});
  gemm_nn(A.data.data(), B.data.data(), C.data.data(), m, k, n);
  return t.record(std::move(C), {a.id, b.id}, [ai = a.id, bi = b.id, m, k, n](Tape& tp, std::size_t self) {
    const double* dC = tp.grad(self).data();
    if (double* dA = grad_of(tp, ai)) gemm_nt(dC, tp.value(bi).data.data(), dA, m, n, k);
    if (double* dB = grad_of(tp, bi)) gemm_tn(tp.value(ai).data.data(), dC, dB, m, k, n);
  });
}

namespace {

template <typename Fwd, typename Bwd>
Var binary_elementwise(Var a, Var b, const char* name, Fwd fwd, Bwd bwd) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, name);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(A[i], B[i]);
  return t.record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, bwd](Tape& tp, std::size_t self) {
    const std::vector<double>& g = tp.grad(self);
    const Tensor& A = tp.value(ai);
    const Tensor& B = tp.value(bi);
    double* dA = grad_of(tp, ai);
    double* dB = grad_of(tp, bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto [ga, gb] = bwd(A[i], B[i], g[i]);
      if (dA) dA[i] += ga;
      if (dB) dB[i] += gb;
    }
  });
}

template <typename Fwd, typename Bwd>
Var unary_elementwise(Var x, Fwd fwd, Bwd bwd) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  Tensor out(X.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(X[i]);
  return t.record(std::move(out), {x.id}, [xi = x.id, bwd](Tape& tp, std::size_t self) {
    const std::vector<double>& g = tp.grad(self);
    const Tensor& X = tp.value(xi);
    const Tensor& Y = tp.value(self);
    double* dX = tp.grad(xi).data();
    for (std::size_t i = 0; i < g.size(); ++i) dX[i] += g[i] * bwd(X[i], Y[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

Var sub(Var a, Var b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

Var mul(Var a, Var b) {
  return binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Var scale(Var a, double s) {
  return unary_elementwise(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary_elementwise(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var add_bias(Var a, Var bias) {
  Tape& t = same_tape(a, bias);
  const Tensor& A = a.value();
  const Tensor& b = bias.value();
  const std::size_t n = b.numel();
  const bool ok = b.rank() == 1 &&
                  ((A.rank() == 2 && A.dim(1) == n) || (A.rank() == 1 && A.dim(0) == n));
  if (!ok) {
    throw DimensionError("add_bias: cannot broadcast " + shape_string(b.shape) + " over " +
                         shape_string(A.shape));
  }
  Tensor out = A;
  out.grad.clear();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i % n];
  return t.record(std::move(out), {a.id, bias.id}, [ai = a.id, bi = bias.id, n](Tape& tp, std::size_t self) {
    const std::vector<double>& g = tp.grad(self);
    if (double* dA = grad_of(tp, ai)) {
      for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
    }
    if (double* dB = grad_of(tp, bi)) {
      for (std::size_t i = 0; i < g.size(); ++i) dB[i % n] += g[i];
    }
  });
}

Var add_channel_bias(Var a, Var bias) {
  Tape& t = same_tape(a, bias);
  const Tensor& A = a.value();
  const Tensor& b = bias.value();
  if (A.rank() != 3 || b.rank() != 1 || b.dim(0) != A.dim(0)) {
    throw DimensionError("add_channel_bias: cannot broadcast " + shape_string(b.shape) + " over " +
                         shape_string(A.shape));
  }
  const std::size_t plane = A.dim(1) * A.dim(2);
  Tensor out = A;
  out.grad.clear();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i / plane];
  return t.record(std::move(out), {a.id, bias.id}, [ai = a.id, bi = bias.id, plane](Tape& tp, std::size_t self) {
    const std::vector<double>& g = tp.grad(self);
    if (double* dA = grad_of(tp, ai)) {
      for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
    }
    if (double* dB = grad_of(tp, bi)) {
      for (std::size_t i = 0; i < g.size(); ++i) dB[i / plane] += g[i];
    }
  });
}

Var activate(Var x, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return unary_elementwise(
          x, [](double v) { return v > 0.0 ? v : 0.0; },
          [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::sigmoid:
      return unary_elementwise(
          x, [](double v) { return sigmoid(v); }, [](double, double y) { return y * (1.0 - y); });
    case Activation::tanh:
      return unary_elementwise(
          x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
  }
  throw ContractError("unknown activation");
}

Var exp(Var x) {
  return unary_elementwise(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var square(Var x) {
  return unary_elementwise(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sum(Var x) {
  Tape& t = *x.tape;
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return t.record(Tensor::scalar(s), {x.id}, [xi = x.id](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (double& d : tp.grad(xi)) d += g;
  });
}

Var mean(Var x) {
  const std::size_t n = x.numel();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var softmax(Var x) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  if ((X.rank() != 1 && X.rank() != 2) || X.numel() == 0) {
    throw DimensionError("softmax expects a non-empty rank-1 or rank-2 tensor, got " +
                         shape_string(X.shape));
  }
  const std::size_t cols = X.shape.back();
  const std::size_t rows = X.numel() / cols;
  Tensor Y(X.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = X.data.data() + r * cols;
    double* out = Y.data.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      out[j] = std::exp(in[j] - mx);
      z += out[j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[j] /= z;
  }
  return t.record(std::move(Y), {x.id}, [xi = x.id, rows, cols](Tape& tp, std::size_t self) {
    const std::vector<double>& g = tp.grad(self);
    const Tensor& Y = tp.value(self);
    double* dX = tp.grad(xi).data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[o + j] * Y[o + j];
      for (std::size_t j = 0; j < cols; ++j) dX[o + j] += Y[o + j] * (g[o + j] - dot);
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tape& t = *x.tape;
  Tensor out = x.value().reshaped(std::move(shape));
  return t.record(std::move(out), {x.id}, [xi = x.id](Tape& tp, std::size_t self) {
    const std::vector<double>& g = tp.grad(self);
    double* dX = tp.grad(xi).data();
    for (std::size_t i = 0; i < g.size(); ++i) dX[i] += g[i];
  });
}

namespace {

struct ConvGeom {
  std::size_t cin, h, w, cout, k, stride, pad, oh, ow;

  // Output columns j with 0 <= j*stride + v - pad < w.
  std::pair<std::size_t, std::size_t> col_range(std::size_t v) const {
    const long long s = static_cast<long long>(stride);
    const long long off = static_cast<long long>(v) - static_cast<long long>(pad);
    long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    long long hi = (static_cast<long long>(w) - 1 - off);
    hi = hi < 0 ? -1 : hi / s;
    hi = std::min<long long>(hi, static_cast<long long>(ow) - 1);
    if (hi < lo) return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi + 1)};
  }
};

}  // namespace

Var conv2d(Var input, Var kernels, std::size_t stride, std::size_t padding) {
  Tape& t = same_tape(input, kernels);
  const Tensor& X = input.value();
  const Tensor& K = kernels.value();
  if (X.rank() != 3 || K.rank() != 4 || K.dim(1) != X.dim(0) || K.dim(2) != K.dim(3)) {
    throw DimensionError("conv2d: input " + shape_string(X.shape) + " incompatible with kernels " +
                         shape_string(K.shape));
  }
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  ConvGeom g{X.dim(0), X.dim(1), X.dim(2), K.dim(0), K.dim(2), stride, padding, 0, 0};
  if (g.k > g.h + 2 * padding || g.k > g.w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_string(K.shape) + " larger than padded input " +
                         shape_string(X.shape));
  }
  g.oh = (g.h + 2 * padding - g.k) / stride + 1;
  g.ow = (g.w + 2 * padding - g.k) / stride + 1;

  Tensor Y({g.cout, g.oh, g.ow});
  for (std::size_t o = 0; o < g.cout; ++o) {
    double* yplane = Y.data.data() + o * g.oh * g.ow;
    for (std::size_t c = 0; c < g.cin; ++c) {
      const double* xplane = X.data.data() + c * g.h * g.w;
      for (std::size_t u = 0; u < g.k; ++u) {
        for (std::size_t v = 0; v < g.k; ++v) {
          const double wv = K[((o * g.cin + c) * g.k + u) * g.k + v];
          const auto [j0, j1] = g.col_range(v);
          for (std::size_t i = 0; i < g.oh; ++i) {
            const long long xi = static_cast<long long>(i * stride + u) - static_cast<long long>(padding);
            if (xi < 0 || xi >= static_cast<long long>(g.h)) continue;
            const double* xrow = xplane + static_cast<std::size_t>(xi) * g.w;
            double* yrow = yplane + i * g.ow;
            for (std::size_t j = j0; j < j1; ++j) yrow[j] += wv * xrow[j * stride + v - padding];
          }
        }
      }
    }
  }

  return t.record(std::move(Y), {input.id, kernels.id}, [xid = input.id, kid = kernels.id, g](Tape& tp, std::size_t self) {
    const double* dY = tp.grad(self).data();
    const Tensor& X = tp.value(xid);
    const Tensor& K = tp.value(kid);
    double* dX = grad_of(tp, xid);
    double* dK = grad_of(tp, kid);
    for (std::size_t o = 0; o < g.cout; ++o) {
      const double* gplane = dY + o * g.oh * g.ow;
      for (std::size_t c = 0; c < g.cin; ++c) {
        const double* xplane = X.data.data() + c * g.h * g.w;
        double* dxplane = dX ? dX + c * g.h * g.w : nullptr;
        for (std::size_t u = 0; u < g.k; ++u) {
          for (std::size_t v = 0; v < g.k; ++v) {
            const std::size_t kidx = ((o * g.cin + c) * g.k + u) * g.k + v;
            const double wv = K[kidx];
            const auto [j0, j1] = g.col_range(v);
            double acc = 0.0;
            for (std::size_t i = 0; i < g.oh; ++i) {
              const long long xi = static_cast<long long>(i * g.stride + u) - static_cast<long long>(g.pad);
              if (xi < 0 || xi >= static_cast<long long>(g.h)) continue;
              const std::size_t xoff = static_cast<std::size_t>(xi) * g.w;
              const double* grow = gplane + i * g.ow;
              for (std::size_t j = j0; j < j1; ++j) {
                const std::size_t xj = xoff + j * g.stride + v - g.pad;
                acc += grow[j] * xplane[xj];
                if (dxplane) dxplane[xj] += grow[j] * wv;
              }
            }
            if (dK) dK[kidx] += acc;
          }
        }
      }
    }
  });
}

Var select(Var x, std::size_t i) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  if (X.rank() < 1 || i >= X.dim(0)) {
    throw DimensionError("select: index " + std::to_string(i) + " out of range for " +
                         shape_string(X.shape));
  }
  Tensor out = unstack_row(X, i);
  const std::size_t n = out.numel();
  return t.record(std::move(out), {x.id}, [xi = x.id, i, n](Tape& tp, std::size_t self) {
    const std::vector<double>& g = tp.grad(self);
    double* dX = tp.grad(xi).data() + i * n;
    for (std::size_t k = 0; k < n; ++k) dX[k] += g[k];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of zero parts");
  Tape& t = *parts.front().tape;
  const std::size_t cols = parts.front().value().shape.back();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  std::vector<double> values;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (p.tape != &t) throw ContractError("concat_rows: operands live on different tapes");
    if (v.rank() != 2 || v.dim(1) != cols) {
      throw DimensionError("concat_rows: part of shape " + shape_string(v.shape) +
                           " does not have " + std::to_string(cols) + " columns");
    }
    rows += v.dim(0);
    ids.push_back(p.id);
    values.insert(values.end(), v.data.begin(), v.data.end());
  }
  return t.record(Tensor({rows, cols}, std::move(values)), ids, [ids](Tape& tp, std::size_t self) {
    const std::vector<double>& g = tp.grad(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t n = tp.value(id).numel();
      if (double* d = grad_of(tp, id)) {
        for (std::size_t k = 0; k < n; ++k) d[k] += g[off + k];
      }
      off += n;
    }
  });
}

Var compute_loss(Var pred, Var target, LossKind kind) {
  Tape& t = same_tape(pred, target);
  require_same_shape(pred, target, "compute_loss");
  const Tensor& P = pred.value();
  const Tensor& T = target.value();
  if (P.numel() == 0) throw DimensionError("compute_loss on empty tensors");
  if (kind == LossKind::cross_entropy) {
    const std::size_t rows = P.rank() == 2 ? P.dim(0) : 1;
    const double inv_rows = 1.0 / static_cast<double>(rows);
    double s = 0.0;
    for (std::size_t i = 0; i < P.numel(); ++i) {
      if (T[i] != 0.0) s -= T[i] * std::log(P[i] + kLogGuard);
    }
    // log(1 + guard) is slightly negative for a perfect prediction.
    return t.record(Tensor::scalar(std::max(0.0, s * inv_rows)), {pred.id, target.id},
                    [pi = pred.id, ti = target.id, inv_rows](Tape& tp, std::size_t self) {
                      const double g = tp.grad(self)[0] * inv_rows;
                      const Tensor& P = tp.value(pi);
                      const Tensor& T = tp.value(ti);
                      if (double* dP = grad_of(tp, pi)) {
                        for (std::size_t i = 0; i < P.numel(); ++i) dP[i] -= g * T[i] / (P[i] + kLogGuard);
                      }
                      if (double* dT = grad_of(tp, ti)) {
                        for (std::size_t i = 0; i < P.numel(); ++i) dT[i] -= g * std::log(P[i] + kLogGuard);
                      }
                    });
  }
  const double inv_n = 1.0 / static_cast<double>(P.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < P.numel(); ++i) s += (P[i] - T[i]) * (P[i] - T[i]);
  return t.record(Tensor::scalar(s * inv_n), {pred.id, target.id},
                  [pi = pred.id, ti = target.id, inv_n](Tape& tp, std::size_t self) {
                    const double g = tp.grad(self)[0] * inv_n;
                    const Tensor& P = tp.value(pi);
                    const Tensor& T = tp.value(ti);
                    double* dP = grad_of(tp, pi);
                    double* dT = grad_of(tp, ti);
                    for (std::size_t i = 0; i < P.numel(); ++i) {
                      const double d = 2.0 * (P[i] - T[i]) * g;
                      if (dP) dP[i] += d;
                      if (dT) dT[i] -= d;
                    }
                  });
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_gradient: step must be positive");
  Tensor probe = x;
  probe.grad.clear();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

void sgd_step(std::span<Tensor* const> params, std::vector<std::vector<double>>& velocity, double lr,
              double momentum) {
  if (!(lr > 0.0)) throw ContractError("sgd_step: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ContractError("sgd_step: momentum must be in [0, 1)");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) {
      throw ContractError("sgd_step: parameter " + std::to_string(i) + " has no gradient");
    }
  }
  if (velocity.size() < params.size()) velocity.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    std::vector<double>& v = velocity[i];
    if (v.size() != p.numel()) v.assign(p.numel(), 0.0);
    for (std::size_t k = 0; k < p.numel(); ++k) {
      v[k] = momentum * v[k] + p.grad[k];
      p.data[k] -= lr * v[k];
    }
    p.grad.clear();
  }
}

SgdMomentum::SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {
  if (!(lr > 0.0)) throw ContractError("SgdMomentum: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ContractError("SgdMomentum: momentum must be in [0, 1)");
}

void SgdMomentum::step(std::span<Tensor* const> params) { sgd_step(params, velocity_, lr_, momentum_); }

}  // namespace dnd

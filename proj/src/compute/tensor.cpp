#include "gklab/compute/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace gklab::compute {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> data(element_count(shape), value);
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("expected a matrix, got shape " + to_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("expected a matrix, got shape " + to_string(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on non-scalar tensor of shape " + to_string(shape_));
  }
  return data_[0];
}

Tensor Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  if (r >= rows()) throw ShapeError("row index out of range");
  return Tensor({1, c}, std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(r * c),
                                            data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("cannot compare shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + to_string(t.shape()));
  }
}

}  // namespace

namespace {

// out (n×m) = a (n×k) · b (k×m), all row-major. Each output element is summed in
// increasing p order, so results do not depend on the tiling.
void gemm(std::size_t n, std::size_t k, std::size_t m, const double* __restrict pa,
          const double* __restrict pb, double* __restrict po) {
  constexpr std::size_t kTile = 16;
  for (std::size_t i = 0; i < n; ++i) {
    const double* __restrict arow = pa + i * k;
    double* __restrict orow = po + i * m;
    std::size_t j0 = 0;
    for (; j0 + kTile <= m; j0 += kTile) {
      double acc[kTile] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* __restrict brow = pb + p * m + j0;
        for (std::size_t j = 0; j < kTile; ++j) acc[j] += av * brow[j];
      }
      for (std::size_t j = 0; j < kTile; ++j) orow[j0 + j] = acc[j];
    }
    for (std::size_t j = j0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * pb[p * m + j];
      orow[j] = acc;
    }
  }
}

void transpose_raw(std::size_t n, std::size_t m, const double* __restrict in, double* __restrict out) {
  constexpr std::size_t kBlock = 16;
  for (std::size_t i0 = 0; i0 < n; i0 += kBlock) {
    const std::size_t i1 = std::min(n, i0 + kBlock);
    for (std::size_t j0 = 0; j0 < m; j0 += kBlock) {
      const std::size_t j1 = std::min(m, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) out[j * n + i] = in[i * m + j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree for shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  Tensor out({n, m});
  gemm(n, k, m, a.data().data(), b.data().data(), out.data().data());
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree for shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  std::vector<double> bt(k * m);
  transpose_raw(m, k, b.data().data(), bt.data());
  Tensor out({n, m});
  gemm(n, k, m, a.data().data(), bt.data(), out.data().data());
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul_tn: inner dimensions disagree for shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  std::vector<double> at(n * k);
  transpose_raw(k, n, a.data().data(), at.data());
  Tensor out({n, m});
  gemm(n, k, m, at.data(), b.data().data(), out.data().data());
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out({m, n});
  transpose_raw(n, m, a.data().data(), out.data().data());
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor out(s);
  const auto in = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * n * inner + b;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(in[base + i * inner] - mx);
        o[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < n; ++i) o[base + i * inner] /= sum;
    }
  }
  return out;
}

Tensor log_softmax_last(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t outer = x.size() / std::max<std::size_t>(n, 1);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < outer; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(in[i] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < n; ++i) o[i] = in[i] - lse;
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace gklab::compute

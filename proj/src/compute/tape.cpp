#include "gklab/compute/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gklab::compute {

const Tensor& GradientMap::at(ValueId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) {
    throw UnknownSlotError("no gradient recorded for value " + std::to_string(id.index));
  }
  return it->second;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  }
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

// dst += src, treating an empty dst as zero.
void accumulate(Tensor& dst, const Tensor& src) {
  if (dst.size() == 0 && dst.shape() != src.shape()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

void accumulate_scaled(Tensor& dst, const Tensor& src, double s) {
  if (dst.size() == 0 && dst.shape() != src.shape()) dst = Tensor(src.shape());
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += s * src[i];
}

bool empty_slot(const Tensor& t, const Tensor& like) {
  return t.size() == 0 && t.shape() != like.shape();
}

}  // namespace

void Tape::check(ValueId id) const {
  if (id.index >= values_.size()) {
    throw UnknownSlotError("value " + std::to_string(id.index) + " is not on this tape (size " +
                           std::to_string(values_.size()) + ")");
  }
}

const Tensor& Tape::value(ValueId id) const {
  check(id);
  return *values_[id.index];
}

OpKind Tape::kind(ValueId id) const {
  check(id);
  return ops_[id.index].kind;
}

ValueId Tape::push(Op op, Tensor out) {
  storage_.push_back(std::move(out));
  values_.push_back(&storage_.back());
  ops_.push_back(std::move(op));
  return ValueId{static_cast<std::uint32_t>(values_.size() - 1)};
}

ValueId Tape::leaf(Tensor value) { return push(Op{}, std::move(value)); }

ValueId Tape::borrow(const Tensor& value) {
  values_.push_back(&value);
  ops_.push_back(Op{});
  return ValueId{static_cast<std::uint32_t>(values_.size() - 1)};
}

Tensor Tape::evaluate(const Op& op, const Tensor* a, const Tensor* b) {
  switch (op.kind) {
    case OpKind::kLeaf:
      throw ContractError("leaves have no recorded computation");
    case OpKind::kMatmul:
      return compute::matmul(*a, *b);
    case OpKind::kMatmulNT:
      return compute::matmul_nt(*a, *b);
    case OpKind::kAdd:
      require_same_shape(*a, *b, "add");
      return zip(*a, *b, [](double x, double y) { return x + y; });
    case OpKind::kSub:
      require_same_shape(*a, *b, "sub");
      return zip(*a, *b, [](double x, double y) { return x - y; });
    case OpKind::kMul:
      require_same_shape(*a, *b, "mul");
      return zip(*a, *b, [](double x, double y) { return x * y; });
    case OpKind::kScale: {
      Tensor out(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i) out[i] = op.scalar * (*a)[i];
      return out;
    }
    case OpKind::kGelu: {
      Tensor out(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i) out[i] = compute::gelu((*a)[i]);
      return out;
    }
    case OpKind::kSoftmax:
      return compute::softmax(*a, op.param);
    case OpKind::kLogSoftmax:
      return compute::log_softmax_last(*a);
    case OpKind::kGather: {
      const std::size_t c = a->cols();
      Tensor out({op.indices.size(), c});
      for (std::size_t r = 0; r < op.indices.size(); ++r) {
        if (op.indices[r] >= a->rows()) {
          throw ShapeError("gather: index " + std::to_string(op.indices[r]) +
                           " out of range for shape " + to_string(a->shape()));
        }
        std::copy_n(a->data().data() + op.indices[r] * c, c, out.data().data() + r * c);
      }
      return out;
    }
    case OpKind::kSum: {
      double s = 0.0;
      for (double v : a->data()) s += v;
      return Tensor::scalar(s);
    }
    case OpKind::kMean: {
      double s = 0.0;
      for (double v : a->data()) s += v;
      return Tensor::scalar(s / static_cast<double>(a->size()));
    }
    case OpKind::kPick:
      if (op.param >= a->size()) throw ShapeError("pick: index out of range");
      return Tensor::scalar((*a)[op.param]);
    case OpKind::kReplaceRow: {
      const std::size_t c = a->cols();
      if (b->size() != c || op.param >= a->rows()) {
        throw ShapeError("replace_row: cannot place shape " + to_string(b->shape()) + " into " +
                         to_string(a->shape()));
      }
      Tensor out = *a;
      std::copy_n(b->data().data(), c, out.data().data() + op.param * c);
      return out;
    }
    case OpKind::kSelect: {
      require_same_shape(*a, *b, "select");
      if (op.mask.size() != a->size()) throw ShapeError("select: mask size mismatch");
      Tensor out(a->shape());
      for (std::size_t i = 0; i < a->size(); ++i) out[i] = op.mask[i] ? (*b)[i] : (*a)[i];
      return out;
    }
    case OpKind::kCopy:
      return *a;
  }
  throw ContractError("unknown op");
}

#define GKLAB_UNARY(name, KIND)                                      \
  ValueId Tape::name(ValueId a) {                                    \
    check(a);                                                        \
    Op op{.kind = OpKind::KIND, .a = a.index};                       \
    Tensor out = evaluate(op, values_[a.index], nullptr);            \
    return push(std::move(op), std::move(out));                     \
  }

#define GKLAB_BINARY(name, KIND)                                     \
  ValueId Tape::name(ValueId a, ValueId b) {                         \
    check(a);                                                        \
    check(b);                                                        \
    Op op{.kind = OpKind::KIND, .a = a.index, .b = b.index};         \
    Tensor out = evaluate(op, values_[a.index], values_[b.index]);   \
    return push(std::move(op), std::move(out));                     \
  }

GKLAB_BINARY(matmul, kMatmul)
GKLAB_BINARY(matmul_nt, kMatmulNT)
GKLAB_BINARY(add, kAdd)
GKLAB_BINARY(sub, kSub)
GKLAB_BINARY(mul, kMul)
GKLAB_UNARY(gelu, kGelu)
GKLAB_UNARY(log_softmax, kLogSoftmax)
GKLAB_UNARY(sum, kSum)
GKLAB_UNARY(mean, kMean)
GKLAB_UNARY(copy, kCopy)

#undef GKLAB_UNARY
#undef GKLAB_BINARY

ValueId Tape::scale(ValueId a, double factor) {
  check(a);
  Op op{.kind = OpKind::kScale, .a = a.index, .scalar = factor};
  Tensor out = evaluate(op, values_[a.index], nullptr);
  return push(std::move(op), std::move(out));
}

ValueId Tape::softmax(ValueId a, std::size_t axis) {
  check(a);
  Op op{.kind = OpKind::kSoftmax, .a = a.index, .param = axis};
  Tensor out = evaluate(op, values_[a.index], nullptr);
  return push(std::move(op), std::move(out));
}

ValueId Tape::gather(ValueId table, std::vector<std::size_t> indices) {
  check(table);
  Op op{.kind = OpKind::kGather, .a = table.index, .indices = std::move(indices)};
  Tensor out = evaluate(op, values_[table.index], nullptr);
  return push(std::move(op), std::move(out));
}

ValueId Tape::pick(ValueId a, std::size_t flat_index) {
  check(a);
  Op op{.kind = OpKind::kPick, .a = a.index, .param = flat_index};
  Tensor out = evaluate(op, values_[a.index], nullptr);
  return push(std::move(op), std::move(out));
}

ValueId Tape::replace_row(ValueId a, ValueId b, std::size_t row) {
  check(a);
  check(b);
  Op op{.kind = OpKind::kReplaceRow, .a = a.index, .b = b.index, .param = row};
  Tensor out = evaluate(op, values_[a.index], values_[b.index]);
  return push(std::move(op), std::move(out));
}

ValueId Tape::select(ValueId a, ValueId b, std::vector<std::uint8_t> mask) {
  check(a);
  check(b);
  Op op{.kind = OpKind::kSelect, .a = a.index, .b = b.index, .mask = std::move(mask)};
  Tensor out = evaluate(op, values_[a.index], values_[b.index]);
  return push(std::move(op), std::move(out));
}

namespace {

bool is_binary(OpKind k) {
  switch (k) {
    case OpKind::kMatmul:
    case OpKind::kMatmulNT:
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kReplaceRow:
    case OpKind::kSelect:
      return true;
    default:
      return false;
  }
}

}  // namespace

GradientMap Tape::backward(ValueId loss, std::span<const ValueId> wanted) const {
  check(loss);
  for (ValueId w : wanted) check(w);
  if (values_[loss.index]->size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        to_string(values_[loss.index]->shape()));
  }

  const std::size_t n = loss.index + 1;
  std::vector<std::uint8_t> live(n, 0);
  for (ValueId w : wanted)
    if (w.index < n) live[w.index] = 1;
  for (std::size_t i = 0; i < n; ++i) {
    const Op& op = ops_[i];
    if (op.kind == OpKind::kLeaf || live[i]) continue;
    live[i] = live[op.a] || (is_binary(op.kind) && live[op.b]);
  }

  std::vector<Tensor> grads(n);
  grads[loss.index] = Tensor::full(values_[loss.index]->shape(), 1.0);

  for (std::size_t i = n; i-- > 0;) {
    const Op& op = ops_[i];
    if (op.kind == OpKind::kLeaf || !live[i]) continue;
    const Tensor& g = grads[i];
    if (empty_slot(g, *values_[i])) continue;
    const Tensor& A = *values_[op.a];
    const bool ga = live[op.a];
    const bool gb = is_binary(op.kind) && live[op.b];
    switch (op.kind) {
      case OpKind::kLeaf:
        break;
      case OpKind::kMatmul: {
        const Tensor& B = *values_[op.b];
        if (ga) accumulate(grads[op.a], compute::matmul_nt(g, B));
        if (gb) accumulate(grads[op.b], compute::matmul_tn(A, g));
        break;
      }
      case OpKind::kMatmulNT: {
        const Tensor& B = *values_[op.b];
        if (ga) accumulate(grads[op.a], compute::matmul(g, B));
        if (gb) accumulate(grads[op.b], compute::matmul_tn(g, A));
        break;
      }
      case OpKind::kAdd:
        if (ga) accumulate(grads[op.a], g);
        if (gb) accumulate(grads[op.b], g);
        break;
      case OpKind::kSub:
        if (ga) accumulate(grads[op.a], g);
        if (gb) accumulate_scaled(grads[op.b], g, -1.0);
        break;
      case OpKind::kMul: {
        const Tensor& B = *values_[op.b];
        if (ga) accumulate(grads[op.a], zip(g, B, [](double x, double y) { return x * y; }));
        if (gb) accumulate(grads[op.b], zip(g, A, [](double x, double y) { return x * y; }));
        break;
      }
      case OpKind::kScale:
        if (ga) accumulate_scaled(grads[op.a], g, op.scalar);
        break;
      case OpKind::kGelu:
        if (ga) {
          Tensor d(A.shape());
          for (std::size_t k = 0; k < A.size(); ++k) d[k] = g[k] * compute::gelu_grad(A[k]);
          accumulate(grads[op.a], d);
        }
        break;
      case OpKind::kSoftmax:
        if (ga) {
          const Tensor& y = *values_[i];
          const Shape& s = y.shape();
          std::size_t outer = 1, inner = 1;
          for (std::size_t k = 0; k < op.param; ++k) outer *= s[k];
          for (std::size_t k = op.param + 1; k < s.size(); ++k) inner *= s[k];
          const std::size_t len = s[op.param];
          Tensor d(s);
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
              const std::size_t base = o * len * inner + in;
              double dot = 0.0;
              for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
              for (std::size_t k = 0; k < len; ++k) {
                const std::size_t idx = base + k * inner;
                d[idx] = y[idx] * (g[idx] - dot);
              }
            }
          }
          accumulate(grads[op.a], d);
        }
        break;
      case OpKind::kLogSoftmax:
        if (ga) {
          const Tensor& y = *values_[i];
          const std::size_t len = y.shape().back();
          const std::size_t outer = y.size() / len;
          Tensor d(y.shape());
          for (std::size_t o = 0; o < outer; ++o) {
            double gs = 0.0;
            for (std::size_t k = 0; k < len; ++k) gs += g[o * len + k];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t idx = o * len + k;
              d[idx] = g[idx] - std::exp(y[idx]) * gs;
            }
          }
          accumulate(grads[op.a], d);
        }
        break;
      case OpKind::kGather:
        if (ga) {
          Tensor& dst = grads[op.a];
          if (empty_slot(dst, A)) dst = Tensor(A.shape());
          const std::size_t c = A.cols();
          for (std::size_t r = 0; r < op.indices.size(); ++r) {
            double* drow = dst.data().data() + op.indices[r] * c;
            const double* grow = g.data().data() + r * c;
            for (std::size_t k = 0; k < c; ++k) drow[k] += grow[k];
          }
        }
        break;
      case OpKind::kSum:
      case OpKind::kMean:
        if (ga) {
          const double s = op.kind == OpKind::kSum ? g.item() : g.item() / static_cast<double>(A.size());
          Tensor& dst = grads[op.a];
          if (empty_slot(dst, A)) dst = Tensor(A.shape());
          for (std::size_t k = 0; k < A.size(); ++k) dst[k] += s;
        }
        break;
      case OpKind::kPick:
        if (ga) {
          Tensor& dst = grads[op.a];
          if (empty_slot(dst, A)) dst = Tensor(A.shape());
          dst[op.param] += g.item();
        }
        break;
      case OpKind::kReplaceRow: {
        const std::size_t c = A.cols();
        if (ga) {
          Tensor d = g;
          std::fill_n(d.data().data() + op.param * c, c, 0.0);
          accumulate(grads[op.a], d);
        }
        if (gb) {
          const Tensor& B = *values_[op.b];
          Tensor d(B.shape());
          std::copy_n(g.data().data() + op.param * c, c, d.data().data());
          accumulate(grads[op.b], d);
        }
        break;
      }
      case OpKind::kSelect: {
        if (ga) {
          Tensor d(A.shape());
          for (std::size_t k = 0; k < A.size(); ++k) d[k] = op.mask[k] ? 0.0 : g[k];
          accumulate(grads[op.a], d);
        }
        if (gb) {
          Tensor d(A.shape());
          for (std::size_t k = 0; k < A.size(); ++k) d[k] = op.mask[k] ? g[k] : 0.0;
          accumulate(grads[op.b], d);
        }
        break;
      }
      case OpKind::kCopy:
        if (ga) accumulate(grads[op.a], g);
        break;
    }
  }

  GradientMap out;
  for (ValueId w : wanted) {
    const Tensor& v = *values_[w.index];
    if (w.index < n && !empty_slot(grads[w.index], v)) {
      out.insert(w, grads[w.index]);
    } else {
      out.insert(w, Tensor(v.shape()));
    }
  }
  return out;
}

std::vector<Tensor> Tape::replay() const {
  std::vector<Tensor> out;
  out.reserve(values_.size());
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const Op& op = ops_[i];
    if (op.kind == OpKind::kLeaf) {
      out.push_back(*values_[i]);
      continue;
    }
    const Tensor* b = is_binary(op.kind) ? &out[op.b] : nullptr;
    out.push_back(evaluate(op, &out[op.a], b));
  }
  return out;
}

}  // namespace gklab::compute

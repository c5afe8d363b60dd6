#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "gklab/compute/tensor.hpp"

namespace gklab::compute {

/// Handle to a value recorded on a Tape.
struct ValueId {
  std::uint32_t index = 0;
  friend auto operator<=>(const ValueId&, const ValueId&) = default;
};

/// Raised when a value handle does not belong to the tape it is used with.
class UnknownSlotError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatmul,
  kMatmulNT,
  kAdd,
  kSub,
  kMul,
  kScale,
  kGelu,
  kSoftmax,
  kLogSoftmax,
  kGather,
  kSum,
  kMean,
  kPick,
  kReplaceRow,
  kSelect,
  kCopy,
};

/// Gradients of a scalar loss with respect to requested tape values.
class GradientMap {
 public:
  bool contains(ValueId id) const { return grads_.contains(id); }
  const Tensor& at(ValueId id) const;
  std::size_t size() const { return grads_.size(); }
  void insert(ValueId id, Tensor grad) { grads_.insert_or_assign(id, std::move(grad)); }

 private:
  std::map<ValueId, Tensor> grads_;
};

/// Topologically ordered record of primitive operations.
///
/// Values are appended in creation order, so every op's inputs precede it.
/// Leaves created with `borrow` reference caller-owned tensors that must
/// outlive the tape; every other value is owned by the tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  ValueId leaf(Tensor value);
  ValueId borrow(const Tensor& value);

  ValueId matmul(ValueId a, ValueId b);
  ValueId matmul_nt(ValueId a, ValueId b);
  ValueId add(ValueId a, ValueId b);
  ValueId sub(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  ValueId scale(ValueId a, double factor);
  ValueId gelu(ValueId a);
  ValueId softmax(ValueId a, std::size_t axis);
  ValueId log_softmax(ValueId a);
  /// Rows `indices` of a matrix, stacked.
  ValueId gather(ValueId table, std::vector<std::size_t> indices);
  ValueId sum(ValueId a);
  ValueId mean(ValueId a);
  /// Single element at a flat index, as a scalar.
  ValueId pick(ValueId a, std::size_t flat_index);
  /// `a` with row `row` replaced by the single-row value `b`.
  ValueId replace_row(ValueId a, ValueId b, std::size_t row);
  /// Element-wise `mask ? b : a`.
  ValueId select(ValueId a, ValueId b, std::vector<std::uint8_t> mask);
  ValueId copy(ValueId a);

  const Tensor& value(ValueId id) const;
  std::size_t size() const noexcept { return values_.size(); }
  OpKind kind(ValueId id) const;

  /// Reverse-mode gradients of scalar `loss` with respect to every `wanted` value.
  GradientMap backward(ValueId loss, std::span<const ValueId> wanted) const;

  /// Recomputes every non-leaf value from the recorded leaves.
  std::vector<Tensor> replay() const;

 private:
  struct Op {
    OpKind kind = OpKind::kLeaf;
    std::uint32_t a = 0;
    std::uint32_t b = 0;
    double scalar = 0.0;
    std::size_t param = 0;
    std::vector<std::size_t> indices;
    std::vector<std::uint8_t> mask;
  };

  void check(ValueId id) const;
  ValueId push(Op op, Tensor out);
  static Tensor evaluate(const Op& op, const Tensor* a, const Tensor* b);

  std::vector<Op> ops_;
  std::vector<const Tensor*> values_;
  std::deque<Tensor> storage_;
};

}  // namespace gklab::compute

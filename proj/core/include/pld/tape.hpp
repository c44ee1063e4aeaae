#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "pld/tensor.hpp"

namespace pld {

enum class Transpose { kNo, kYes };

// Positions of masked tokens (row indices into the logits) and the ids the
// model should recover at those rows.
struct MaskedTargets {
  std::vector<std::size_t> positions;
  std::vector<std::int32_t> labels;
};

struct DropoutKey {
  std::uint64_t seed{0};
  std::uint64_t stream{0};
};

// Define-by-run recorder for reverse-mode differentiation. Every op computes
// its forward value eagerly; when recording and at least one input requires a
// gradient, a closure that back-propagates into the inputs is appended.
// A Tape is meant to live for one forward/backward pass.
template <typename T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t op_count() const noexcept { return ops_.size(); }

  // [m,k]x[k,n] -> [m,n]; with Transpose::kYes b is stored as [n,k].
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose tb = Transpose::kNo);
  // [g,m,k]x[g,k,n] -> [g,m,n]; with Transpose::kYes b is stored as [g,n,k].
  Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose tb = Transpose::kNo);

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> scale(const Tensor<T>& a, T factor);
  // x[..., d] + bias[d]
  Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

  Tensor<T> sum(const Tensor<T>& a);
  Tensor<T> mean(const Tensor<T>& a);

  // Normalizes over the last axis, then applies gain and bias.
  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);
  Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
  Tensor<T> gelu(const Tensor<T>& x);
  // Inverted dropout; identity when rate == 0.
  Tensor<T> dropout(const Tensor<T>& x, double rate, DropoutKey key);

  // table[V,d], ids[n] -> [n,d]
  Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);

  // [b*s, h*dh] <-> [b*h, s, dh]
  Tensor<T> split_heads(const Tensor<T>& x, std::size_t batch, std::size_t seq, std::size_t heads);
  Tensor<T> merge_heads(const Tensor<T>& x, std::size_t batch, std::size_t seq, std::size_t heads);

  // Mean negative log-likelihood over the listed rows of logits[n,V].
  Tensor<T> cross_entropy(const Tensor<T>& logits, const MaskedTargets& targets);

  // Seeds d(loss)/d(loss) = 1 and replays the recorded ops in reverse. Leaf
  // gradients accumulate; the tape is cleared afterwards.
  void backward(const Tensor<T>& loss);

 private:
  using Node = TensorNode<T>;
  using NodePtr = std::shared_ptr<Node>;
  // Receives the finished output node (value and accumulated gradient).
  using BackwardFn = std::function<void(const Node& out)>;

  struct Op {
    NodePtr output;
    BackwardFn backward;
  };

  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const;
  Tensor<T> emit(Shape shape, Buffer<T> value, bool needs_grad, BackwardFn fn);

  bool record_;
  std::vector<Op> ops_;
};

extern template class Tape<float>;
extern template class Tape<double>;

// GELU constants (tanh approximation): 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

}  // namespace pld

#pragma once

#include <cstddef>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace pld {

using Shape = std::vector<std::size_t>;

// Every tensor buffer starts on a 64-byte boundary. Vectorized kernels peel
// leading elements up to the first aligned address, so a fixed alignment
// keeps results independent of where the allocator happened to put them.
inline constexpr std::size_t kBufferAlignment = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kBufferAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kBufferAlignment}); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until something flows into it
  bool requires_grad{false};
};

// Dense row-major array with shared ownership. Copies of a Tensor alias the
// same storage; clone() makes an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, Buffer<T> data, bool requires_grad = false);
  Tensor(Shape shape, std::span<const T> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled view when nothing has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> grad_mut();
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const;
  Tensor detach() const;

  const void* id() const noexcept { return node_.get(); }
  TensorNode<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& shared_node() const noexcept { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace pld

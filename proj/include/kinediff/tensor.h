#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace kinediff {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tensor;

/// 64-byte aligned storage. Vectorized kernels pick their code path from the
/// buffer address, so a fixed alignment keeps results bit-identical from run
/// to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, kAlign);
  }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {

struct Node {
  Shape shape;
  Buffer values;
  Buffer grad; // empty until the first backward pass touches it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const {
    return !backward;
  }
  Buffer& ensure_grad() {
    if (grad.size() != values.size()) {
      grad.assign(values.size(), 0.0);
    }
    return grad;
  }
};

} // namespace detail

/// Dense row-major float64 array with reverse-mode automatic differentiation.
///
/// A Tensor is a cheap handle onto a shared node; copies alias the same
/// values. Operations record a tape entry whenever any input requires a
/// gradient and gradient recording is enabled (see NoGradGuard).
class Tensor {
 public:
  /// A rank-0 tensor holding 0.
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  /// A leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> values);

  const Shape& shape() const;
  std::size_t rank() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Mutable access for in-place updates of leaves (optimizer steps, tests).
  std::span<double> mutable_values();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  /// Gradient buffer (zeros if no backward pass reached this tensor).
  std::vector<double> grad() const;
  void zero_grad();

  /// Backpropagates d(this)/d(leaf) into every requires_grad leaf. Leaf
  /// gradients accumulate across calls; intermediate gradients are reset.
  void backward() const;

  /// Same values, no history, no gradient.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const {
    return node_;
  }
  explicit Tensor(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables tape recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise arithmetic with numpy-style broadcasting.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator+(const Tensor& a, double b);
Tensor operator*(const Tensor& a, double b);
Tensor operator*(double a, const Tensor& b);

Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor gelu(const Tensor& x);

/// Batched matrix product over the last two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Picks `indices` along `axis`; repeated indices are allowed.
Tensor gather(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& indices);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis and applies gamma/beta (shape [C]).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Euclidean norm along the last axis (dropped). The gradient at a zero
/// vector is taken as zero.
Tensor norm_last(const Tensor& x);

/// x @ weight + bias for weight [in, out], bias [out]; x is [..., in].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

} // namespace kinediff

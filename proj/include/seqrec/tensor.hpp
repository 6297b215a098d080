#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seqrec/rng.hpp"

namespace seqrec {

using Shape = std::vector<std::size_t>;
using ItemId = std::int32_t;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  std::optional<std::size_t> tape_id;

  double* ensure_grad();
};

/// Dense float64 array with shared storage.
///
/// Copying a Tensor copies the handle, not the buffer; use `clone()` for a
/// deep copy. Leaf tensors created with `parameter()` collect gradients; all
/// other tensors only do so when produced by a recorded operation.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  static Tensor parameter(Shape shape, std::vector<double> data);

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }
  std::optional<std::size_t> tape_id() const { return impl_->tape_id; }

  // Deep copy; a parameter stays a parameter.
  Tensor clone() const;
  // Deep copy that never collects gradients.
  Tensor detach() const;

  const TensorImpl* identity() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend class GradientTape;
  friend Tensor make_tensor(Shape, std::vector<double>);
};

Tensor make_tensor(Shape shape, std::vector<double> data);

/// Append-only record of differentiable operations (define-by-run).
class GradientTape {
 public:
  using BackwardFn = std::function<void(const TensorImpl& out)>;

  struct Node {
    std::shared_ptr<TensorImpl> output;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    BackwardFn backward;
  };

  // Registers `out` as the product of `parents`; returns its handle.
  std::size_t record(Tensor& out, std::vector<std::shared_ptr<TensorImpl>> parents, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every node once in reverse order.
  /// Returns the number of nodes visited.
  std::size_t backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  bool contains(const Tensor& t) const;
  void clear();

 private:
  std::vector<Node> nodes_;
};

// Makes a tape active on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(GradientTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradientTape* previous_;
};

GradientTape* active_tape();

// Backward on the active tape.
void backward(const Tensor& loss);

// Boolean mask with the same element count as the tensor it is applied to.
using Mask = std::vector<std::uint8_t>;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor pow_scalar(const Tensor& x, double p);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
Tensor logsumexp(const Tensor& x, int axis, bool keepdim = false);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-8);
Tensor gather_rows(const Tensor& table, std::span<const ItemId> ids);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
Tensor masked_fill(const Tensor& x, const Mask& mask, double value);
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
Tensor dropout(const Tensor& x, double p, CounterRng& rng, bool training);

// Composed helpers.
Tensor relu(const Tensor& x);
Tensor neg(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }

}  // namespace seqrec

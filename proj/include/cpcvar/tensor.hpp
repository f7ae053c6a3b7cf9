#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cpcvar/errors.hpp"

namespace cpcvar {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until materialized

  void materialize_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

using TensorDataPtr = std::shared_ptr<TensorData>;

// Value-semantics handle onto a node in the computation graph. All data is
// 64-bit float, row-major. Gradients live next to values and are populated
// by Tape::backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> value, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t numel() const { return static_cast<int64_t>(d_->value.size()); }
  int64_t dim(size_t i) const { return d_->shape[i]; }
  size_t ndim() const { return d_->shape.size(); }

  const std::vector<double>& value() const { return d_->value; }
  std::vector<double>& mutable_value() { return d_->value; }
  double item() const;

  bool requires_grad() const { return d_->requires_grad; }
  bool has_grad() const { return !d_->grad.empty(); }
  // Zero vector when backward never touched this tensor.
  const std::vector<double>& grad() const {
    d_->materialize_grad();
    return d_->grad;
  }

  TensorDataPtr data_ptr() const { return d_; }
  static Tensor wrap(TensorDataPtr d) {
    Tensor t;
    t.d_ = std::move(d);
    return t;
  }

 private:
  TensorDataPtr d_;
};

// Records executed primitives for reverse-mode differentiation. One tape is
// active per thread at a time; primitives executed while a tape is active
// and touching grad-requiring inputs are recorded on it. A tape and its
// tensors are confined to one thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Populates grad buffers of every tensor the loss depends on. Fails if
  // loss is not scalar, the tape is empty, or backward already ran.
  void backward(const Tensor& loss);

  size_t node_count() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  static Tape* active();
  void record(const char* op_name, std::vector<TensorDataPtr> inputs, TensorDataPtr output,
              std::function<void()> vjp);

 private:
  struct Node {
    const char* op_name;
    std::vector<TensorDataPtr> inputs;
    TensorDataPtr output;
    std::function<void()> vjp;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
  Tape* previous_ = nullptr;
};

// ---- Primitives ----
// Every primitive validates input shapes (ShapeError naming the primitive and
// shapes), checks outputs for NaN/Inf (NumericError), and registers an exact
// vector-Jacobian product on the active tape.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double s);
Tensor div_scalar(const Tensor& a, double s);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t end);
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor transpose2d(const Tensor& a);
Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids);
Tensor softmax_lastdim(const Tensor& a);
Tensor log_softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& a);
Tensor avg_pool2d(const Tensor& a, int64_t out_h, int64_t out_w);
Tensor bilinear_resize2d(const Tensor& a, int64_t out_h, int64_t out_w);
Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int64_t>& targets);
Tensor mask_mul(const Tensor& a, const std::vector<double>& mask);
Tensor bias_add(const Tensor& x, const Tensor& b);
Tensor sum_all(const Tensor& a);
Tensor space_to_depth(const Tensor& a, int64_t block);
Tensor depth_to_space(const Tensor& a, int64_t block);

// Central-difference gradient of a deterministic scalar function. Evaluates
// f twice at theta to detect nondeterminism before differencing.
std::vector<double> finite_diff_gradient(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> theta,
    double epsilon);

}  // namespace cpcvar

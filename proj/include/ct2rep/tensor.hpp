#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Operations record
// themselves on the thread's active Tape (see TapeScope) whenever one of
// their inputs requires a gradient; with no active tape nothing is recorded,
// which is how inference runs.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ct2rep {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  std::size_t dim() const { return storage_->shape.size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const { return storage_->data.size(); }
  // 2-D accessors; a 1-D tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return storage_->data; }
  // Direct writes are reserved for initialization, tests and optimizer steps.
  std::span<double> mutable_data() { return storage_->data; }
  double item() const;
  double at(std::size_t i) const { return storage_->data.at(i); }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool on) { storage_->requires_grad = on; }
  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const double> grad() const { return storage_->grad; }
  void zero_grad() { storage_->grad.clear(); }

  // Deep copy with no gradient history.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

  const std::shared_ptr<TensorStorage>& storage() const { return storage_; }

 private:
  std::shared_ptr<TensorStorage> storage_;
};

// Ordered record of the operations of one forward pass. Entries are appended
// in execution order, so every entry's inputs were produced before it.
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& out_grad)>;

  void record(const Tensor& output, BackwardFn backward);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Active tape of the calling thread, or nullptr.
  static Tape* active();

 private:
  struct Entry {
    std::shared_ptr<TensorStorage> output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  friend void backward(const Tensor& loss, Tape& tape);
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
// into the grad buffer of every requires_grad tensor reachable from loss.
void backward(const Tensor& loss, Tape& tape);

// Adds `delta` into the gradient buffer of t, allocating it on first use.
void accumulate_grad(const std::shared_ptr<TensorStorage>& t, std::span<const double> delta);
std::vector<double>& grad_buffer(const std::shared_ptr<TensorStorage>& t);

// ---------------------------------------------------------------------------
// Operations. Matrices are row-major 2-D tensors.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// x[m×n] (+|⊙) v broadcast over rows; v has n elements.
Tensor add_rowwise(const Tensor& x, const Tensor& v);
Tensor mul_rowwise(const Tensor& x, const Tensor& v);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation; smooth everywhere

Tensor softmax(const Tensor& x, std::size_t axis);
// Zero-mean / unit-variance over the last axis, no affine part.
Tensor normalize_last(const Tensor& x, double eps);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Mean next-token cross-entropy of logits[L×V] against targets; positions
// whose target equals ignore_id are excluded from the mean.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::size_t ignore_id);

// Row-wise log-softmax values (no gradient); used by decoding.
std::vector<double> log_softmax_row(std::span<const double> logits);

}  // namespace ct2rep

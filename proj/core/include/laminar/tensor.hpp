#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "laminar/errors.hpp"
#include "laminar/rng.hpp"

namespace laminar {

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;

namespace autodiff {

// Append-only reverse-mode tape. Node inputs always reference earlier nodes,
// so a single reverse sweep visits every node exactly once. The tape is
// thread-local: one recording per thread, activated by a Recording scope.
class Tape {
 public:
  struct Node {
    size_t size = 0;
    std::vector<double> grad;            // d(root)/d(output); empty until touched
    std::function<void(Tape&)> backprop; // pushes this node's grad to its inputs
  };

  bool recording() const { return depth_ > 0 && paused_ == 0; }
  bool has_nodes() const { return !nodes_.empty(); }
  uint64_t generation() const { return generation_; }

  int add_node(size_t size);
  Node& node(int id) { return nodes_[size_t(id)]; }
  // += g into the node's grad buffer, allocating zeros on first touch.
  void accumulate(int id, std::span<const double> g);

  // Reverse sweep seeded with d(root)/d(root)=1, then clears the tape.
  void run_backward(int root);
  void clear();

 private:
  friend class Recording;
  friend class NoGrad;
  std::vector<Node> nodes_;
  uint64_t generation_ = 1;
  int depth_ = 0;
  int paused_ = 0;
};

Tape& tape();  // thread-local instance

// Activates gradient recording for its scope (nestable).
class Recording {
 public:
  Recording();
  ~Recording();
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;
};

// Suspends recording inside an active Recording (buffer updates, optimizers).
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

}  // namespace autodiff

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<std::vector<double>> grad;  // null until backward touches it
  int node_id = -1;
  uint64_t node_gen = 0;
};
}  // namespace detail

// Dense row-major f64 tensor. Value-semantics handle over a shared buffer:
// copies alias the same storage. Data is treated as immutable between a
// recorded forward pass and its backward; grad buffers and optimizer updates
// mutate in place.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);              // rank-0
  static Tensor from_vector(std::vector<double> v);  // rank-1
  static Tensor uniform(Shape shape, double lo, double hi, SplitMix64& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  size_t rank() const { return shape().size(); }
  size_t numel() const;
  size_t dim(size_t axis) const;

  std::span<double> data();
  std::span<const double> data() const;
  std::vector<double> to_vector() const;
  double item() const;  // NotScalar unless numel()==1
  double at(std::initializer_list<size_t> idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  Tensor grad() const;  // zeros-shaped tensor when no buffer is present
  void accumulate_grad(std::span<const double> g);
  void zero_grad();  // drops the buffer; absent grads read as zero

  Tensor clone() const;               // deep copy of data only
  void copy_from(const Tensor& src);  // same-shape in-place data overwrite

  const void* id() const { return impl_.get(); }

  // autodiff plumbing
  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  int live_node(const autodiff::Tape& t) const;
  void set_node(int id, uint64_t gen);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---- elementwise ops (trailing-dimension broadcasting, size-1 stretch) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor pow(const Tensor& a, double exponent);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return divide(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- matmul and reductions ----
Tensor matmul(const Tensor& a, const Tensor& b);  // rank-2 only

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<size_t>& axes);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, const std::vector<size_t>& axes);
Tensor max_reduce(const Tensor& a);
Tensor max_reduce(const Tensor& a, const std::vector<size_t>& axes);
Tensor rms(const Tensor& a);  // sqrt(mean(a^2)), full reduction

// ---- shape ops ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, size_t axis);

// ---- losses ----
Tensor log_softmax(const Tensor& a);  // rank-2, row-wise, max-stabilized
Tensor softmax(const Tensor& a);      // exp(log_softmax)
Tensor cross_entropy(const Tensor& logits, const Tensor& targets);
Tensor mse(const Tensor& pred, const Tensor& target);

// ---- backward ----
void backward(const Tensor& loss);

// ---- data-only utilities (never recorded) ----
Tensor stack_rows(const std::vector<Tensor>& rows);       // new leading axis
std::vector<Tensor> unstack_rows(const Tensor& batch);    // split leading axis
Tensor take_rows(const Tensor& t, std::span<const size_t> idxs);
Tensor argmax_axis(const Tensor& t, size_t axis);         // drops the axis
Tensor row(const Tensor& t, size_t i);

bool bitwise_equal(const Tensor& a, const Tensor& b);
bool allclose(const Tensor& a, const Tensor& b, double atol = 1e-9, double rtol = 0.0);
std::string to_string(const Tensor& t);

}  // namespace laminar

#include "laminar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace laminar {

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// ---------------------------------------------------------------- autodiff

namespace autodiff {

Tape& tape() {
  thread_local Tape t;
  return t;
}

int Tape::add_node(size_t size) {
  nodes_.push_back(Node{size, {}, nullptr});
  return int(nodes_.size()) - 1;
}

void Tape::accumulate(int id, std::span<const double> g) {
  Node& n = nodes_[size_t(id)];
  if (n.grad.empty()) n.grad.assign(n.size, 0.0);
  for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::run_backward(int root) {
  Node& r = nodes_[size_t(root)];
  r.grad.assign(r.size, 0.0);
  r.grad[0] = 1.0;
  for (size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad.empty() && n.backprop) n.backprop(*this);
  }
  clear();
}

void Tape::clear() {
  nodes_.clear();
  ++generation_;
}

Recording::Recording() { ++tape().depth_; }
Recording::~Recording() {
  Tape& t = tape();
  if (--t.depth_ == 0 && t.has_nodes()) t.clear();
}

NoGrad::NoGrad() { ++tape().paused_; }
NoGrad::~NoGrad() { --tape().paused_; }

}  // namespace autodiff

// ------------------------------------------------------------------ Tensor

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size())
    throw ShapeMismatch("shape " + shape_str(shape) + " does not hold " +
                        std::to_string(data.size()) + " elements");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

void check_defined(const Tensor& t, const char* who) {
  if (!t.defined()) throw ShapeMismatch(std::string(who) + ": undefined tensor");
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> data)
    : impl_(make_impl(std::move(shape), std::move(data))) {}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::from_vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, SplitMix64& rng) {
  size_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& x : d) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d));
}

const Shape& Tensor::shape() const {
  static const Shape empty;
  return impl_ ? impl_->shape : empty;
}

size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

size_t Tensor::dim(size_t axis) const {
  if (!impl_ || axis >= impl_->shape.size())
    throw IndexError("dim " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::span<double> Tensor::data() {
  check_defined(*this, "data");
  return {impl_->data.data(), impl_->data.size()};
}

std::span<const double> Tensor::data() const {
  check_defined(*this, "data");
  return {impl_->data.data(), impl_->data.size()};
}

std::vector<double> Tensor::to_vector() const {
  check_defined(*this, "to_vector");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<size_t> idx) const {
  check_defined(*this, "at");
  const Shape& s = impl_->shape;
  if (idx.size() != s.size()) throw IndexError("at(): rank mismatch");
  size_t off = 0;
  size_t d = 0;
  for (size_t i : idx) {
    if (i >= s[d]) throw IndexError("at(): index out of range");
    off = off * s[d] + i;
    ++d;
  }
  return impl_->data[off];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  check_defined(*this, "set_requires_grad");
  impl_->requires_grad = on;
  if (!on) impl_->grad.reset();
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

Tensor Tensor::grad() const {
  check_defined(*this, "grad");
  if (!impl_->grad) return Tensor::zeros(impl_->shape);
  return Tensor(impl_->shape, *impl_->grad);
}

void Tensor::accumulate_grad(std::span<const double> g) {
  check_defined(*this, "accumulate_grad");
  if (g.size() != impl_->data.size()) throw ShapeMismatch("grad size mismatch");
  if (!impl_->grad)
    impl_->grad = std::make_shared<std::vector<double>>(impl_->data.size(), 0.0);
  auto& acc = *impl_->grad;
  for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::clone() const {
  check_defined(*this, "clone");
  return Tensor(impl_->shape, impl_->data);
}

void Tensor::copy_from(const Tensor& src) {
  check_defined(*this, "copy_from");
  check_defined(src, "copy_from");
  if (impl_->shape != src.impl()->shape)
    throw ShapeMismatch("copy_from " + shape_str(src.shape()) + " into " + shape_str(shape()));
  impl_->data = src.impl()->data;
}

int Tensor::live_node(const autodiff::Tape& t) const {
  if (!impl_ || impl_->node_id < 0 || impl_->node_gen != t.generation()) return -1;
  return impl_->node_id;
}

void Tensor::set_node(int id, uint64_t gen) {
  impl_->node_id = id;
  impl_->node_gen = gen;
}

// ----------------------------------------------------------- broadcasting

namespace {

struct BPlan {
  Shape out;
  std::vector<size_t> sa, sb;  // per-out-axis strides; 0 marks a stretched axis
};

std::vector<size_t> row_major_strides(const Shape& s) {
  std::vector<size_t> st(s.size(), 1);
  for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

BPlan broadcast_plan(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  BPlan p;
  p.out.resize(r);
  p.sa.resize(r);
  p.sb.resize(r);
  auto stra = row_major_strides(a);
  auto strb = row_major_strides(b);
  for (size_t i = 0; i < r; ++i) {
    size_t out_ax = r - 1 - i;
    size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    size_t dim;
    if (da == db) dim = da;
    else if (da == 1) dim = db;
    else if (db == 1) dim = da;
    else
      throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out[out_ax] = dim;
    p.sa[out_ax] = (i < a.size() && da != 1) ? stra[a.size() - 1 - i] : 0;
    p.sb[out_ax] = (i < b.size() && db != 1) ? strb[b.size() - 1 - i] : 0;
    if (da == 1 && dim != 1) p.sa[out_ax] = 0;
    if (db == 1 && dim != 1) p.sb[out_ax] = 0;
  }
  return p;
}

template <class F>
void for_each_broadcast(const BPlan& p, F&& f) {
  size_t n = shape_numel(p.out);
  size_t r = p.out.size();
  std::vector<size_t> idx(r, 0);
  size_t oa = 0, ob = 0;
  for (size_t k = 0; k < n; ++k) {
    f(k, oa, ob);
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += p.sa[d];
      ob += p.sb[d];
      if (idx[d] < p.out[d]) break;
      oa -= p.sa[d] * p.out[d];
      ob -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

bool needs_grad(const Tensor& x) {
  auto& t = autodiff::tape();
  return x.requires_grad() || x.live_node(t) >= 0;
}

// Registers x on the tape, creating a leaf node for grad-requiring tensors
// that are not yet recorded. Leaf backprop accumulates (+=) into the tensor's
// grad buffer.
int ensure_node(autodiff::Tape& t, const Tensor& x) {
  int id = x.live_node(t);
  if (id >= 0) return id;
  if (!x.requires_grad()) return -1;
  id = t.add_node(x.numel());
  auto impl = x.impl();
  t.node(id).backprop = [id, impl](autodiff::Tape& tp) {
    auto& g = tp.node(id).grad;
    if (g.empty()) return;
    if (!impl->grad)
      impl->grad = std::make_shared<std::vector<double>>(impl->data.size(), 0.0);
    auto& acc = *impl->grad;
    for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  };
  impl->node_id = id;
  impl->node_gen = t.generation();
  return id;
}

using BinGrad = double (*)(double a, double b, double y);

Tensor binary_op(const Tensor& a, const Tensor& b, double (*fwd)(double, double),
                 BinGrad dfa, BinGrad dfb) {
  check_defined(a, "binary op");
  check_defined(b, "binary op");
  BPlan plan = broadcast_plan(a.shape(), b.shape());
  std::vector<double> out_data(shape_numel(plan.out));
  auto pa = a.data();
  auto pb = b.data();
  for_each_broadcast(plan, [&](size_t k, size_t oa, size_t ob) {
    out_data[k] = fwd(pa[oa], pb[ob]);
  });
  Tensor out(plan.out, std::move(out_data));

  auto& t = autodiff::tape();
  if (t.recording() && (needs_grad(a) || needs_grad(b))) {
    int ia = ensure_node(t, a);
    int ib = ensure_node(t, b);
    int io = t.add_node(out.numel());
    out.set_node(io, t.generation());
    t.node(io).backprop = [io, ia, ib, plan, a, b, out, dfa, dfb](autodiff::Tape& tp) {
      auto& g = tp.node(io).grad;
      if (g.empty()) return;
      std::vector<double> ga(ia >= 0 ? a.numel() : 0, 0.0);
      std::vector<double> gb(ib >= 0 ? b.numel() : 0, 0.0);
      auto va = a.data();
      auto vb = b.data();
      auto vo = out.data();
      for_each_broadcast(plan, [&](size_t k, size_t oa, size_t ob) {
        if (ia >= 0) ga[oa] += dfa(va[oa], vb[ob], vo[k]) * g[k];
        if (ib >= 0) gb[ob] += dfb(va[oa], vb[ob], vo[k]) * g[k];
      });
      if (ia >= 0) tp.accumulate(ia, ga);
      if (ib >= 0) tp.accumulate(ib, gb);
    };
  }
  return out;
}

Tensor unary_op(const Tensor& a, const std::function<double(double)>& fwd,
                const std::function<double(double, double)>& df) {
  check_defined(a, "unary op");
  std::vector<double> out_data(a.numel());
  auto pa = a.data();
  for (size_t i = 0; i < out_data.size(); ++i) out_data[i] = fwd(pa[i]);
  Tensor out(a.shape(), std::move(out_data));

  auto& t = autodiff::tape();
  if (t.recording() && needs_grad(a)) {
    int ia = ensure_node(t, a);
    int io = t.add_node(out.numel());
    out.set_node(io, t.generation());
    t.node(io).backprop = [io, ia, a, out, df](autodiff::Tape& tp) {
      auto& g = tp.node(io).grad;
      if (g.empty()) return;
      std::vector<double> ga(a.numel(), 0.0);
      auto va = a.data();
      auto vo = out.data();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] = df(va[i], vo[i]) * g[i];
      tp.accumulate(ia, ga);
    };
  }
  return out;
}

bool grad_required(const Tensor& a) {
  return autodiff::tape().recording() && needs_grad(a);
}

}  // namespace

// ------------------------------------------------------------ elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor pow(const Tensor& a, double e) {
  return unary_op(
      a, [e](double x) { return std::pow(x, e); },
      [e](double x, double) { return e * std::pow(x, e - 1.0); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  if (grad_required(a)) {
    for (double x : a.data())
      if (x <= 0.0) throw DomainError("log of non-positive input with grad required");
  }
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  if (grad_required(a)) {
    for (double x : a.data())
      if (x <= 0.0) throw DomainError("sqrt of non-positive input with grad required");
  }
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ----------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeMismatch("matmul expects rank-2, got " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
  size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeMismatch("matmul inner dims disagree: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  std::vector<double> out_data(m * n, 0.0);
  auto pa = a.data();
  auto pb = b.data();
  for (size_t i = 0; i < m; ++i)
    for (size_t l = 0; l < k; ++l) {
      double av = pa[i * k + l];
      if (av == 0.0) continue;
      for (size_t j = 0; j < n; ++j) out_data[i * n + j] += av * pb[l * n + j];
    }
  Tensor out(Shape{m, n}, std::move(out_data));

  auto& t = autodiff::tape();
  if (t.recording() && (needs_grad(a) || needs_grad(b))) {
    int ia = ensure_node(t, a);
    int ib = ensure_node(t, b);
    int io = t.add_node(out.numel());
    out.set_node(io, t.generation());
    t.node(io).backprop = [io, ia, ib, a, b, m, k, n](autodiff::Tape& tp) {
      auto& g = tp.node(io).grad;
      if (g.empty()) return;
      auto va = a.data();
      auto vb = b.data();
      if (ia >= 0) {
        std::vector<double> ga(m * k, 0.0);  // g . b^T
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j) {
            double gv = g[i * n + j];
            if (gv == 0.0) continue;
            for (size_t l = 0; l < k; ++l) ga[i * k + l] += gv * vb[l * n + j];
          }
        tp.accumulate(ia, ga);
      }
      if (ib >= 0) {
        std::vector<double> gb(k * n, 0.0);  // a^T . g
        for (size_t i = 0; i < m; ++i)
          for (size_t l = 0; l < k; ++l) {
            double av = va[i * k + l];
            if (av == 0.0) continue;
            for (size_t j = 0; j < n; ++j) gb[l * n + j] += av * g[i * n + j];
          }
        tp.accumulate(ib, gb);
      }
    };
  }
  return out;
}

// ------------------------------------------------------------- reductions

namespace {

struct ReducePlan {
  Shape out_shape;
  std::vector<size_t> out_offset;  // input linear index -> output linear index
  size_t count = 1;                // elements folded into each output cell
};

ReducePlan reduce_plan(const Shape& in, std::vector<size_t> axes) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (size_t ax : axes)
    if (ax >= in.size()) throw IndexError("reduce axis " + std::to_string(ax) +
                                          " out of range for " + shape_str(in));
  std::vector<bool> reduced(in.size(), false);
  for (size_t ax : axes) reduced[ax] = true;

  ReducePlan p;
  for (size_t i = 0; i < in.size(); ++i) {
    if (reduced[i]) p.count *= in[i];
    else p.out_shape.push_back(in[i]);
  }

  size_t n = shape_numel(in);
  p.out_offset.resize(n);
  Shape out = p.out_shape;
  auto out_strides = row_major_strides(out);
  std::vector<size_t> idx(in.size(), 0);
  for (size_t lin = 0; lin < n; ++lin) {
    size_t off = 0, od = 0;
    for (size_t d = 0; d < in.size(); ++d) {
      if (!reduced[d]) {
        off += idx[d] * out_strides[od];
        ++od;
      }
    }
    p.out_offset[lin] = off;
    for (size_t d = in.size(); d-- > 0;) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  return p;
}

std::vector<size_t> all_axes(const Shape& s) {
  std::vector<size_t> axes(s.size());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return axes;
}

enum class ReduceKind { Sum, Mean, Max };

Tensor reduce_op(ReduceKind kind, const Tensor& a, const std::vector<size_t>& axes) {
  check_defined(a, "reduce");
  ReducePlan plan = reduce_plan(a.shape(), axes);
  size_t out_n = shape_numel(plan.out_shape);
  if (plan.count == 0 && kind != ReduceKind::Sum)
    throw EmptyReduction("reducing a zero-sized axis of " + shape_str(a.shape()));

  std::vector<double> out_data(out_n, 0.0);
  std::vector<size_t> winners;  // max only: input linear index per out cell
  auto pa = a.data();
  if (kind == ReduceKind::Max) {
    winners.assign(out_n, size_t(-1));
    for (size_t i = 0; i < pa.size(); ++i) {
      size_t o = plan.out_offset[i];
      if (winners[o] == size_t(-1) || pa[i] > out_data[o]) {
        out_data[o] = pa[i];
        winners[o] = i;
      }
    }
  } else {
    for (size_t i = 0; i < pa.size(); ++i) out_data[plan.out_offset[i]] += pa[i];
    if (kind == ReduceKind::Mean)
      for (auto& v : out_data) v /= double(plan.count);
  }
  Tensor out(plan.out_shape, std::move(out_data));

  auto& t = autodiff::tape();
  if (t.recording() && needs_grad(a)) {
    int ia = ensure_node(t, a);
    int io = t.add_node(out.numel());
    out.set_node(io, t.generation());
    double scale = kind == ReduceKind::Mean ? 1.0 / double(plan.count) : 1.0;
    t.node(io).backprop = [io, ia, a, plan, winners, scale, kind](autodiff::Tape& tp) {
      auto& g = tp.node(io).grad;
      if (g.empty()) return;
      std::vector<double> ga(a.numel(), 0.0);
      if (kind == ReduceKind::Max) {
        for (size_t o = 0; o < winners.size(); ++o)
          if (winners[o] != size_t(-1)) ga[winners[o]] += g[o];
      } else {
        for (size_t i = 0; i < ga.size(); ++i) ga[i] = g[plan.out_offset[i]] * scale;
      }
      tp.accumulate(ia, ga);
    };
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce_op(ReduceKind::Sum, a, all_axes(a.shape())); }
Tensor sum(const Tensor& a, const std::vector<size_t>& axes) {
  return reduce_op(ReduceKind::Sum, a, axes);
}
Tensor mean(const Tensor& a) { return reduce_op(ReduceKind::Mean, a, all_axes(a.shape())); }
Tensor mean(const Tensor& a, const std::vector<size_t>& axes) {
  return reduce_op(ReduceKind::Mean, a, axes);
}
Tensor max_reduce(const Tensor& a) { return reduce_op(ReduceKind::Max, a, all_axes(a.shape())); }
Tensor max_reduce(const Tensor& a, const std::vector<size_t>& axes) {
  return reduce_op(ReduceKind::Max, a, axes);
}

Tensor rms(const Tensor& a) { return sqrt(mean(mul(a, a))); }

// -------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined(a, "reshape");
  if (shape_numel(shape) != a.numel())
    throw ShapeMismatch("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  Tensor out(shape, a.to_vector());

  auto& t = autodiff::tape();
  if (t.recording() && needs_grad(a)) {
    int ia = ensure_node(t, a);
    int io = t.add_node(out.numel());
    out.set_node(io, t.generation());
    t.node(io).backprop = [io, ia](autodiff::Tape& tp) {
      auto& g = tp.node(io).grad;
      if (!g.empty()) tp.accumulate(ia, g);
    };
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  if (parts.empty()) throw ShapeMismatch("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw IndexError("concat axis out of range");
  size_t axis_total = 0;
  for (const Tensor& p : parts) {
    check_defined(p, "concat");
    if (p.rank() != s0.size()) throw ShapeMismatch("concat rank mismatch");
    for (size_t d = 0; d < s0.size(); ++d)
      if (d != axis && p.shape()[d] != s0[d])
        throw ShapeMismatch("concat dim mismatch at axis " + std::to_string(d));
    axis_total += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;

  size_t outer = 1, inner = 1;
  for (size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<double> out_data(shape_numel(out_shape));
  size_t cursor = 0;  // axis offset of the current part
  std::vector<size_t> part_offsets;
  for (const Tensor& p : parts) {
    part_offsets.push_back(cursor);
    size_t pa = p.shape()[axis];
    auto pd = p.data();
    for (size_t o = 0; o < outer; ++o)
      std::memcpy(&out_data[(o * axis_total + cursor) * inner], &pd[o * pa * inner],
                  pa * inner * sizeof(double));
    cursor += pa;
  }
  Tensor out(out_shape, std::move(out_data));

  auto& t = autodiff::tape();
  bool any = false;
  for (const Tensor& p : parts) any = any || needs_grad(p);
  if (t.recording() && any) {
    std::vector<int> ids;
    for (const Tensor& p : parts) ids.push_back(ensure_node(t, p));
    int io = t.add_node(out.numel());
    out.set_node(io, t.generation());
    t.node(io).backprop = [io, ids, parts, part_offsets, outer, inner, axis_total,
                           axis](autodiff::Tape& tp) {
      auto& g = tp.node(io).grad;
      if (g.empty()) return;
      for (size_t pi = 0; pi < parts.size(); ++pi) {
        if (ids[pi] < 0) continue;
        size_t pa = parts[pi].shape()[axis];
        std::vector<double> gp(parts[pi].numel());
        for (size_t o = 0; o < outer; ++o)
          std::memcpy(&gp[o * pa * inner],
                      &g[(o * axis_total + part_offsets[pi]) * inner],
                      pa * inner * sizeof(double));
        tp.accumulate(ids[pi], gp);
      }
    };
  }
  return out;
}

// ----------------------------------------------------------------- losses

namespace {

// Row-wise log-softmax into `out`, max-subtraction stabilized.
void log_softmax_rows(std::span<const double> in, size_t n, size_t c,
                      std::vector<double>& out) {
  out.resize(n * c);
  for (size_t r = 0; r < n; ++r) {
    const double* x = &in[r * c];
    double m = x[0];
    for (size_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (size_t j = 0; j < c; ++j) s += std::exp(x[j] - m);
    double ls = std::log(s);
    for (size_t j = 0; j < c; ++j) out[r * c + j] = x[j] - m - ls;
  }
}

}  // namespace

Tensor log_softmax(const Tensor& a) {
  check_defined(a, "log_softmax");
  if (a.rank() != 2) throw ShapeMismatch("log_softmax expects rank-2, got " + shape_str(a.shape()));
  size_t n = a.dim(0), c = a.dim(1);
  std::vector<double> out_data;
  log_softmax_rows(a.data(), n, c, out_data);
  Tensor out(a.shape(), std::move(out_data));

  auto& t = autodiff::tape();
  if (t.recording() && needs_grad(a)) {
    int ia = ensure_node(t, a);
    int io = t.add_node(out.numel());
    out.set_node(io, t.generation());
    t.node(io).backprop = [io, ia, out, n, c](autodiff::Tape& tp) {
      auto& g = tp.node(io).grad;
      if (g.empty()) return;
      std::vector<double> ga(n * c);
      auto y = out.data();
      for (size_t r = 0; r < n; ++r) {
        double gsum = 0.0;
        for (size_t j = 0; j < c; ++j) gsum += g[r * c + j];
        for (size_t j = 0; j < c; ++j)
          ga[r * c + j] = g[r * c + j] - std::exp(y[r * c + j]) * gsum;
      }
      tp.accumulate(ia, ga);
    };
  }
  return out;
}

Tensor softmax(const Tensor& a) { return exp(log_softmax(a)); }

Tensor cross_entropy(const Tensor& logits, const Tensor& targets) {
  check_defined(logits, "cross_entropy");
  check_defined(targets, "cross_entropy");
  if (logits.rank() != 2) throw ShapeMismatch("cross_entropy logits must be rank-2");
  size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.rank() != 1 || targets.dim(0) != n)
    throw ShapeMismatch("cross_entropy targets must be shape (" + std::to_string(n) + ")");
  std::vector<size_t> tis(n);
  auto tv = targets.data();
  for (size_t r = 0; r < n; ++r) {
    double v = tv[r];
    if (std::floor(v) != v || v < 0.0 || v >= double(c))
      throw IndexError("target " + std::to_string(v) + " outside [0," + std::to_string(c) + ")");
    tis[r] = size_t(v);
  }

  std::vector<double> ls;
  log_softmax_rows(logits.data(), n, c, ls);
  double loss = 0.0;
  for (size_t r = 0; r < n; ++r) loss -= ls[r * c + tis[r]];
  loss /= double(n);
  Tensor out = Tensor::scalar(loss);

  auto& t = autodiff::tape();
  if (t.recording() && needs_grad(logits)) {
    int ia = ensure_node(t, logits);
    int io = t.add_node(1);
    out.set_node(io, t.generation());
    t.node(io).backprop = [io, ia, ls, tis, n, c](autodiff::Tape& tp) {
      auto& g = tp.node(io).grad;
      if (g.empty()) return;
      double gv = g[0] / double(n);
      std::vector<double> ga(n * c);
      for (size_t r = 0; r < n; ++r)
        for (size_t j = 0; j < c; ++j)
          ga[r * c + j] = gv * (std::exp(ls[r * c + j]) - (j == tis[r] ? 1.0 : 0.0));
      tp.accumulate(ia, ga);
    };
  }
  return out;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  check_defined(pred, "mse");
  check_defined(target, "mse");
  if (pred.shape() != target.shape())
    throw ShapeMismatch("mse shapes disagree: " + shape_str(pred.shape()) + " vs " +
                        shape_str(target.shape()));
  Tensor d = sub(pred, target);
  return mean(mul(d, d));
}

// --------------------------------------------------------------- backward

void backward(const Tensor& loss) {
  auto& t = autodiff::tape();
  if (!t.recording()) throw NoTape("backward() outside a Recording scope");
  if (!loss.defined() || loss.numel() != 1)
    throw NotScalar("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  int id = loss.live_node(t);
  if (id < 0) throw NoTape("loss is not recorded on the active tape");
  t.run_backward(id);
}

// --------------------------------------------------- data-only utilities

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeMismatch("stack_rows of zero tensors");
  const Shape& s0 = rows[0].shape();
  Shape out_shape;
  out_shape.push_back(rows.size());
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  size_t step = shape_numel(s0);
  std::vector<double> data(rows.size() * step);
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].shape() != s0)
      throw ShapeMismatch("stack_rows: row " + std::to_string(i) + " has shape " +
                          shape_str(rows[i].shape()) + ", expected " + shape_str(s0));
    std::memcpy(&data[i * step], rows[i].data().data(), step * sizeof(double));
  }
  return Tensor(out_shape, std::move(data));
}

std::vector<Tensor> unstack_rows(const Tensor& batch) {
  check_defined(batch, "unstack_rows");
  if (batch.rank() < 1) throw ShapeMismatch("unstack_rows needs rank >= 1");
  size_t n = batch.dim(0);
  Shape row_shape(batch.shape().begin() + 1, batch.shape().end());
  size_t step = shape_numel(row_shape);
  std::vector<Tensor> rows;
  rows.reserve(n);
  auto pd = batch.data();
  for (size_t i = 0; i < n; ++i)
    rows.emplace_back(row_shape,
                      std::vector<double>(pd.begin() + i * step, pd.begin() + (i + 1) * step));
  return rows;
}

Tensor take_rows(const Tensor& t, std::span<const size_t> idxs) {
  check_defined(t, "take_rows");
  if (t.rank() < 1) throw ShapeMismatch("take_rows needs rank >= 1");
  size_t n = t.dim(0);
  Shape row_shape(t.shape().begin() + 1, t.shape().end());
  size_t step = shape_numel(row_shape);
  Shape out_shape = t.shape();
  out_shape[0] = idxs.size();
  std::vector<double> data(idxs.size() * step);
  auto pd = t.data();
  for (size_t i = 0; i < idxs.size(); ++i) {
    if (idxs[i] >= n) throw IndexError("take_rows index out of range");
    std::memcpy(&data[i * step], &pd[idxs[i] * step], step * sizeof(double));
  }
  return Tensor(out_shape, std::move(data));
}

Tensor row(const Tensor& t, size_t i) {
  size_t idx[1] = {i};
  Tensor r = take_rows(t, std::span<const size_t>(idx, 1));
  Shape row_shape(t.shape().begin() + 1, t.shape().end());
  return Tensor(row_shape, r.to_vector());
}

Tensor argmax_axis(const Tensor& t, size_t axis) {
  check_defined(t, "argmax_axis");
  if (axis >= t.rank()) throw IndexError("argmax axis out of range");
  const Shape& s = t.shape();
  Shape out_shape;
  for (size_t d = 0; d < s.size(); ++d)
    if (d != axis) out_shape.push_back(s[d]);
  size_t outer = 1, inner = 1;
  for (size_t d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  size_t extent = s[axis];
  if (extent == 0) throw EmptyReduction("argmax over a zero-sized axis");
  std::vector<double> out(outer * inner, 0.0);
  auto pd = t.data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t in = 0; in < inner; ++in) {
      size_t best = 0;
      double bv = pd[(o * extent) * inner + in];
      for (size_t a = 1; a < extent; ++a) {
        double v = pd[(o * extent + a) * inner + in];
        if (v > bv) {
          bv = v;
          best = a;
        }
      }
      out[o * inner + in] = double(best);
    }
  return Tensor(out_shape, std::move(out));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) return a.defined() == b.defined();
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

bool allclose(const Tensor& a, const Tensor& b, double atol, double rtol) {
  if (a.shape() != b.shape()) return false;
  auto pa = a.data();
  auto pb = b.data();
  for (size_t i = 0; i < pa.size(); ++i)
    if (std::abs(pa[i] - pb[i]) > atol + rtol * std::abs(pb[i])) return false;
  return true;
}

std::string to_string(const Tensor& t) {
  if (!t.defined()) return "Tensor(undefined)";
  std::ostringstream os;
  os << "Tensor" << shape_str(t.shape()) << "[";
  auto pd = t.data();
  size_t n = std::min<size_t>(pd.size(), 12);
  for (size_t i = 0; i < n; ++i) os << (i ? ", " : "") << pd[i];
  if (pd.size() > n) os << ", ...";
  os << "]";
  return os.str();
}

}  // namespace laminar

#include "seqrec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "seqrec/errors.hpp"

namespace seqrec {

namespace {

thread_local GradientTape* g_active_tape = nullptr;

std::size_t normalize_axis(int axis, std::size_t ndim) {
  const int n = static_cast<int>(ndim);
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(ndim));
  }
  return static_cast<std::size_t>(a);
}

// outer x extent x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

void accumulate(TensorImpl* target, std::span<const double> g) {
  if (!target->requires_grad) return;
  double* dst = target->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <class Fn>
void maybe_record(Tensor& out, std::initializer_list<const Tensor*> inputs, Fn&& fn) {
  GradientTape* tape = g_active_tape;
  if (tape == nullptr) return;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
  if (!any) return;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  parents.reserve(inputs.size());
  for (const Tensor* t : inputs) parents.push_back(t->impl());
  tape->record(out, std::move(parents), std::forward<Fn>(fn));
}

void check_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// C[m x n] += A[m x k] * B[k x n], row-major, accumulating over k in order.
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose_into(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

// Index maps for numpy-style broadcasting of two operands.
struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  bc.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
  std::size_t ra = 1, rb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : ra;
    sb[i] = pb[i] == 1 ? 0 : rb;
    ra *= pa[i];
    rb *= pb[i];
  }
  const std::size_t total = shape_numel(bc.out);
  bc.ia.resize(total);
  bc.ib.resize(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    bc.ia[flat] = oa;
    bc.ib[flat] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < bc.out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), name));
  const std::size_t total = shape_numel(bc->out);
  std::vector<double> out(total);
  const auto ad = a.data();
  const auto bd = b.data();
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinaryKind::kAdd: return x + y;
      case BinaryKind::kSub: return x - y;
      case BinaryKind::kMul: return x * y;
    }
    return 0.0;
  };
  if (bc->same) {
    for (std::size_t i = 0; i < total; ++i) out[i] = apply(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < total; ++i) out[i] = apply(ad[bc->ia[i]], bd[bc->ib[i]]);
  }
  Tensor result = make_tensor(bc->out, std::move(out));
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  maybe_record(result, {&a, &b}, [pa, pb, bc, kind](const TensorImpl& o) {
    const auto& g = o.grad;
    const std::size_t n = g.size();
    auto ia = [&](std::size_t i) { return bc->same ? i : bc->ia[i]; };
    auto ib = [&](std::size_t i) { return bc->same ? i : bc->ib[i]; };
    if (pa->requires_grad) {
      double* ga = pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        ga[ia(i)] += kind == BinaryKind::kMul ? g[i] * pb->data[ib(i)] : g[i];
      }
    }
    if (pb->requires_grad) {
      double* gb = pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        double v = g[i];
        if (kind == BinaryKind::kSub) v = -v;
        if (kind == BinaryKind::kMul) v *= pa->data[ia(i)];
        gb[ib(i)] += v;
      }
    }
  });
  return result;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  Tensor result = make_tensor(x.shape(), std::move(out));
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px, deriv](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * deriv(px->data[i], o.data[i]);
  });
  return result;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

double* TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) { impl_->data.assign(1, 0.0); }

Tensor make_tensor(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_string(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) { return make_tensor(std::move(shape), std::move(data)); }

Tensor Tensor::scalar(double value) { return make_tensor({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t = make_tensor(std::move(shape), std::move(data));
  t.impl_->requires_grad = true;
  return t;
}

std::size_t Tensor::dim(int axis) const { return impl_->shape[normalize_axis(axis, impl_->shape.size())]; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  Tensor t = make_tensor(impl_->shape, impl_->data);
  t.impl_->requires_grad = impl_->requires_grad && !impl_->tape_id.has_value();
  return t;
}

Tensor Tensor::detach() const { return make_tensor(impl_->shape, impl_->data); }

std::size_t GradientTape::record(Tensor& out, std::vector<std::shared_ptr<TensorImpl>> parents, BackwardFn fn) {
  const std::size_t id = nodes_.size();
  out.impl_->requires_grad = true;
  out.impl_->tape_id = id;
  nodes_.push_back(Node{out.impl_, std::move(parents), std::move(fn)});
  return id;
}

bool GradientTape::contains(const Tensor& t) const {
  const auto id = t.tape_id();
  return id && *id < nodes_.size() && nodes_[*id].output.get() == t.identity();
}

std::size_t GradientTape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  if (!contains(loss)) throw ContractError("backward: loss was not recorded on this tape");
  const std::size_t start = *loss.tape_id();
  TensorImpl& seed = *nodes_[start].output;
  seed.ensure_grad();
  seed.grad[0] = 1.0;
  std::size_t visited = 0;
  for (std::size_t i = start + 1; i-- > 0;) {
    Node& node = nodes_[i];
    ++visited;
    if (node.output->grad.empty()) continue;
    node.backward(*node.output);
  }
  return visited;
}

void GradientTape::clear() {
  for (auto& node : nodes_) node.output->tape_id.reset();
  nodes_.clear();
}

TapeScope::TapeScope(GradientTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

GradientTape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) throw ContractError("backward: no active tape");
  g_active_tape->backward(loss);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  auto mismatch = [&] { return DimensionError("matmul: " + shape_string(sa) + " x " + shape_string(sb)); };
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0];
    k = sa[1];
    n = sb[1];
    if (sb[0] != k) throw mismatch();
  } else if (sa.size() == 3 && sb.size() == 2) {
    // [B x m x k] x [k x n] is one [(B m) x k] product.
    m = sa[0] * sa[1];
    k = sa[2];
    n = sb[1];
    if (sb[0] != k) throw mismatch();
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    if (sb[0] != batch || sb[1] != k) throw mismatch();
  } else {
    throw mismatch();
  }
  Shape out_shape;
  if (sa.size() == 2) {
    out_shape = {m, n};
  } else {
    out_shape = {sa[0], sa[1], n};
  }
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    gemm_acc(m, k, n, a.data().data() + bi * m * k, b.data().data() + bi * k * n, out.data() + bi * m * n);
  }
  Tensor result = make_tensor(std::move(out_shape), std::move(out));
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  maybe_record(result, {&a, &b}, [pa, pb, batch, m, k, n](const TensorImpl& o) {
    std::vector<double> scratch;
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const double* g = o.grad.data() + bi * m * n;
      const double* av = pa->data.data() + bi * m * k;
      const double* bv = pb->data.data() + bi * k * n;
      if (pa->requires_grad) {
        scratch.resize(n * k);
        transpose_into(k, n, bv, scratch.data());
        gemm_acc(m, n, k, g, scratch.data(), pa->ensure_grad() + bi * m * k);
      }
      if (pb->requires_grad) {
        scratch.resize(k * m);
        transpose_into(m, k, av, scratch.data());
        gemm_acc(k, m, n, scratch.data(), g, pb->ensure_grad() + bi * k * n);
      }
    }
  });
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor add_scalar(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary(
      x, [p](double v) { return std::pow(v, p); }, [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.ndim());
  check_finite(x.data(), "softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(xd[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= total;
    }
  }
  Tensor result = make_tensor(x.shape(), std::move(out));
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px, s](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = ou * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) dot += o.grad[base + j * s.inner] * o.data[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t idx = base + j * s.inner;
          gx[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
  return result;
}

Tensor logsumexp(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.ndim());
  const AxisSplit s = split_at(x.shape(), ax);
  const auto xd = x.data();
  std::vector<double> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) total += std::exp(xd[base + j * s.inner] - mx);
      out[o * s.inner + in] = mx + std::log(total);
    }
  }
  Tensor result = make_tensor(reduced_shape(x.shape(), ax, keepdim), std::move(out));
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px, s](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t r = ou * s.inner + in;
        const std::size_t base = ou * s.extent * s.inner + in;
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t idx = base + j * s.inner;
          gx[idx] += o.grad[r] * std::exp(px->data[idx] - o.data[r]);
        }
      }
    }
  });
  return result;
}

Tensor log_softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.ndim());
  const AxisSplit s = split_at(x.shape(), ax);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) total += std::exp(xd[base + j * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] = xd[base + j * s.inner] - lse;
    }
  }
  Tensor result = make_tensor(x.shape(), std::move(out));
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px, s](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = ou * s.extent * s.inner + in;
        double gsum = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) gsum += o.grad[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t idx = base + j * s.inner;
          gx[idx] += o.grad[idx] - std::exp(o.data[idx]) * gsum;
        }
      }
    }
  });
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " with gain " +
                         shape_string(gain.shape()) + " and bias " + shape_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / std::max<std::size_t>(d, 1);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  auto normalized = std::make_shared<std::vector<double>>(xd.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * inv;
      (*normalized)[r * d + j] = xh;
      out[r * d + j] = xh * gd[j] + bd[j];
    }
  }
  Tensor result = make_tensor(x.shape(), std::move(out));
  TensorImpl* px = x.impl().get();
  TensorImpl* pg = gain.impl().get();
  TensorImpl* pb = bias.impl().get();
  maybe_record(result, {&x, &gain, &bias}, [px, pg, pb, normalized, rstd, rows, d](const TensorImpl& o) {
    const auto& xh = *normalized;
    if (pg->requires_grad) {
      double* gg = pg->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += o.grad[r * d + j] * xh[r * d + j];
    }
    if (pb->requires_grad) {
      double* gb = pb->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += o.grad[r * d + j];
    }
    if (px->requires_grad) {
      double* gx = px->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dxh = o.grad[r * d + j] * pg->data[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh[r * d + j];
        }
        mean_dxh /= static_cast<double>(d);
        mean_dxh_xh /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double dxh = o.grad[r * d + j] * pg->data[j];
          gx[r * d + j] += (*rstd)[r] * (dxh - mean_dxh - xh[r * d + j] * mean_dxh_xh);
        }
      }
    }
  });
  return result;
}

Tensor gather_rows(const Tensor& table, std::span<const ItemId> ids) {
  if (table.ndim() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + shape_string(table.shape()));
  const std::size_t rows = table.dim(0);
  const std::size_t d = table.dim(1);
  for (ItemId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("gather_rows: id " + std::to_string(id) + " outside [0, " + std::to_string(rows) + ")");
    }
  }
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Tensor result = make_tensor({ids.size(), d}, std::move(out));
  TensorImpl* pt = table.impl().get();
  auto kept = std::make_shared<std::vector<ItemId>>(ids.begin(), ids.end());
  maybe_record(result, {&table}, [pt, kept, d](const TensorImpl& o) {
    double* gt = pt->ensure_grad();
    for (std::size_t i = 0; i < kept->size(); ++i) {
      double* dst = gt + static_cast<std::size_t>((*kept)[i]) * d;
      const double* src = o.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return result;
}

Tensor transpose(const Tensor& x) {
  if (x.ndim() != 2 && x.ndim() != 3) throw DimensionError("transpose: rank must be 2 or 3, got " + shape_string(x.shape()));
  const std::size_t batch = x.ndim() == 3 ? x.dim(0) : 1;
  const std::size_t r = x.dim(-2);
  const std::size_t c = x.dim(-1);
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) transpose_into(r, c, x.data().data() + b * r * c, out.data() + b * r * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tensor result = make_tensor(std::move(shape), std::move(out));
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px, batch, r, c](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b) {
      const double* g = o.grad.data() + b * r * c;
      double* dst = gx + b * r * c;
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < r; ++j) dst[j * c + i] += g[i * r + j];
    }
  });
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  Tensor result = make_tensor(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px](const TensorImpl& o) { accumulate(px, o.grad); });
  return result;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) throw DimensionError("concat: " + shape_string(first) + " vs " + shape_string(s));
    out_shape[ax] += s[ax];
  }
  const AxisSplit so = split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.shape()[ax];
    const auto pd = p.data();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(pd.data() + o * ext * so.inner, ext * so.inner, out.data() + (o * so.extent + offset) * so.inner);
    }
    offset += ext;
  }
  Tensor result = make_tensor(out_shape, std::move(out));
  GradientTape* tape = active_tape();
  const bool any = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (tape != nullptr && any) {
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::vector<std::size_t> extents;
    for (const Tensor& p : parts) {
      parents.push_back(p.impl());
      extents.push_back(p.shape()[ax]);
    }
    std::vector<TensorImpl*> raw;
    for (auto& p : parents) raw.push_back(p.get());
    tape->record(result, std::move(parents), [raw, extents, offsets, so](const TensorImpl& o) {
      for (std::size_t i = 0; i < raw.size(); ++i) {
        if (!raw[i]->requires_grad) continue;
        double* g = raw[i]->ensure_grad();
        const std::size_t ext = extents[i];
        for (std::size_t ou = 0; ou < so.outer; ++ou) {
          const double* src = o.grad.data() + (ou * so.extent + offsets[i]) * so.inner;
          double* dst = g + ou * ext * so.inner;
          for (std::size_t j = 0; j < ext * so.inner; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, x.ndim());
  const AxisSplit s = split_at(x.shape(), ax);
  if (begin > end || end > s.extent) {
    throw IndexError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of axis with extent " +
                     std::to_string(s.extent));
  }
  const std::size_t ext = end - begin;
  Shape shape = x.shape();
  shape[ax] = ext;
  std::vector<double> out(s.outer * ext * s.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xd.data() + (o * s.extent + begin) * s.inner, ext * s.inner, out.data() + o * ext * s.inner);
  }
  Tensor result = make_tensor(std::move(shape), std::move(out));
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px, s, begin, ext](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      const double* src = o.grad.data() + ou * ext * s.inner;
      double* dst = gx + (ou * s.extent + begin) * s.inner;
      for (std::size_t j = 0; j < ext * s.inner; ++j) dst[j] += src[j];
    }
  });
  return result;
}

Tensor masked_fill(const Tensor& x, const Mask& mask, double value) {
  if (mask.size() != x.numel()) {
    throw DimensionError("masked_fill: mask of " + std::to_string(mask.size()) + " entries for " +
                         shape_string(x.shape()));
  }
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = mask[i] ? value : xd[i];
  Tensor result = make_tensor(x.shape(), std::move(out));
  TensorImpl* px = x.impl().get();
  auto kept = std::make_shared<Mask>(mask);
  maybe_record(result, {&x}, [px, kept](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (!(*kept)[i]) gx[i] += o.grad[i];
  });
  return result;
}

Tensor relu(const Tensor& x) {
  Mask negative(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) negative[i] = xd[i] < 0.0;
  return masked_fill(x, negative, 0.0);
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor result = Tensor::scalar(total);
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t i = 0; i < px->data.size(); ++i) gx[i] += o.grad[0];
  });
  return result;
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.ndim());
  const AxisSplit s = split_at(x.shape(), ax);
  const auto xd = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.extent; ++j)
      for (std::size_t in = 0; in < s.inner; ++in) out[o * s.inner + in] += xd[(o * s.extent + j) * s.inner + in];
  Tensor result = make_tensor(reduced_shape(x.shape(), ax, keepdim), std::move(out));
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px, s](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t ou = 0; ou < s.outer; ++ou)
      for (std::size_t j = 0; j < s.extent; ++j)
        for (std::size_t in = 0; in < s.inner; ++in) gx[(ou * s.extent + j) * s.inner + in] += o.grad[ou * s.inner + in];
  });
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const std::size_t extent = x.dim(axis);
  if (extent == 0) throw ContractError("mean over empty axis");
  return mul_scalar(sum(x, axis, keepdim), 1.0 / static_cast<double>(extent));
}

Tensor dropout(const Tensor& x, double p, CounterRng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double scale = 1.0 / (1.0 - p);
  auto keep = std::make_shared<std::vector<double>>(x.numel());
  for (double& k : *keep) k = rng.uniform() >= p ? scale : 0.0;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * (*keep)[i];
  Tensor result = make_tensor(x.shape(), std::move(out));
  TensorImpl* px = x.impl().get();
  maybe_record(result, {&x}, [px, keep](const TensorImpl& o) {
    double* gx = px->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * (*keep)[i];
  });
  return result;
}

}  // namespace seqrec

#include "cachesteer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <unordered_set>

#include "cachesteer/errors.hpp"
#include "cachesteer/kernels.hpp"

namespace cachesteer {

namespace {

thread_local bool g_grad_enabled = true;

size_t shape_numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return n;
}

void validate_shape(const std::vector<size_t>& shape, size_t data_size) {
  for (size_t e : shape) {
    if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != data_size) {
    std::ostringstream os;
    os << "shape " << shape_str(shape) << " does not cover " << data_size << " values";
    throw ShapeError(os.str());
  }
}

bool any_requires_grad(const std::vector<NodePtr>& parents) {
  for (const auto& p : parents) {
    if (p && p->requires_grad) return true;
  }
  return false;
}

// Builds an op output node. When recording is off or no parent carries
// gradient, the node is a plain constant and the tape edge is dropped.
Tensor make_op(std::vector<size_t> shape, std::vector<real> data,
               std::vector<NodePtr> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (g_grad_enabled && any_requires_grad(parents)) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

Scalar make_scalar_op(real value, std::vector<NodePtr> parents,
                      std::function<void(Node&)> backward_fn) {
  Tensor t = make_op({}, {value}, std::move(parents), std::move(backward_fn));
  return Scalar(std::move(t.node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor operand");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, size_t rank, const char* op) {
  if (t.rank() != rank) {
    std::ostringstream os;
    os << op << ": expected rank " << rank << ", got shape " << shape_str(t.shape());
    throw ShapeError(os.str());
  }
}

// Numerically stabilized softmax of a contiguous slice. All softmaxes in this
// module route through here so equal inputs produce bit-equal outputs.
void softmax_1d(const real* x, real* out, size_t n) {
  real m = x[0];
  for (size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  real z = 0;
  for (size_t i = 0; i < n; ++i) {
    out[i] = std::exp(x[i] - m);
    z += out[i];
  }
  real inv = real(1) / z;
  for (size_t i = 0; i < n; ++i) out[i] *= inv;
}

real log_sum_exp(const real* x, size_t n) {
  real m = x[0];
  for (size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  real z = 0;
  for (size_t i = 0; i < n; ++i) z += std::exp(x[i] - m);
  return m + std::log(z);
}

void accumulate(Node& n, const real* g, size_t count) {
  n.ensure_grad();
  kernels::add(n.grad.data(), g, n.grad.data(), count);
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::constant(std::vector<size_t> shape, std::vector<real> values) {
  validate_shape(shape, values.size());
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<size_t> shape) {
  size_t n = shape_numel(shape);
  return constant(std::move(shape), std::vector<real>(n, real(0)));
}

Tensor Tensor::full(std::vector<size_t> shape, real value) {
  size_t n = shape_numel(shape);
  return constant(std::move(shape), std::vector<real>(n, value));
}

Tensor Tensor::param(std::vector<size_t> shape, std::vector<real> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node->requires_grad = true;
  t.node->trainable = true;
  return t;
}

const std::vector<real>& Tensor::grad() const {
  node->ensure_grad();
  return node->grad;
}

void Tensor::set_trainable(bool on) {
  if (!node) throw UsageError("set_trainable on undefined tensor");
  if (!node->parents.empty()) throw UsageError("set_trainable on a non-leaf tensor");
  node->trainable = on;
  node->requires_grad = on;
}

Tensor Tensor::detached() const {
  if (!node) return Tensor();
  return Tensor::constant(node->shape, node->data);
}

Scalar Scalar::constant(real value) {
  auto node = std::make_shared<Node>();
  node->data = {value};
  return Scalar(std::move(node));
}

// ---- binary elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  std::vector<real> out(a.size());
  kernels::add(a.data().data(), b.data().data(), out.data(), out.size());
  return make_op(a.shape(), std::move(out), {a.node, b.node}, [](Node& self) {
    for (int i = 0; i < 2; ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) accumulate(p, self.grad.data(), self.grad.size());
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  std::vector<real> out(a.size());
  kernels::sub(a.data().data(), b.data().data(), out.data(), out.size());
  return make_op(a.shape(), std::move(out), {a.node, b.node}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) accumulate(pa, self.grad.data(), self.grad.size());
    if (pb.requires_grad) {
      pb.ensure_grad();
      kernels::axpy(real(-1), self.grad.data(), pb.grad.data(), self.grad.size());
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  std::vector<real> out(a.size());
  kernels::mul(a.data().data(), b.data().data(), out.data(), out.size());
  return make_op(a.shape(), std::move(out), {a.node, b.node}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, real alpha) {
  require_defined(a, "scale");
  std::vector<real> out(a.size());
  kernels::scale(a.data().data(), alpha, out.data(), out.size());
  return make_op(a.shape(), std::move(out), {a.node}, [alpha](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    kernels::axpy(alpha, self.grad.data(), p.grad.data(), self.grad.size());
  });
}

Tensor mul_scalar(const Tensor& a, const Scalar& s) {
  require_defined(a, "mul_scalar");
  if (!s.defined()) throw ShapeError("mul_scalar: undefined scalar operand");
  real sv = s.value();
  std::vector<real> out(a.size());
  kernels::scale(a.data().data(), sv, out.data(), out.size());
  return make_op(a.shape(), std::move(out), {a.node, s.node}, [sv](Node& self) {
    Node& pa = *self.parents[0];
    Node& ps = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      kernels::axpy(sv, self.grad.data(), pa.grad.data(), self.grad.size());
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      ps.grad[0] += kernels::dot(self.grad.data(), pa.data.data(), self.grad.size());
    }
  });
}

// ---- matmul family ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<real> out(m * n);
  kernels::matmul_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), {a.node, b.node}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      kernels::matmul_nt(self.grad.data(), pb.data.data(), pa.grad.data(), m, n, k,
                         /*accumulate=*/true);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      kernels::matmul_tn(pa.data.data(), self.grad.data(), pb.grad.data(), m, k, n,
                         /*accumulate=*/true);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  require_defined(b, "linear");
  require_rank(w, 2, "linear");
  require_rank(b, 1, "linear");
  if (x.rank() != 1 && x.rank() != 2) {
    throw ShapeError("linear: input must be rank 1 or 2, got " + shape_str(x.shape()));
  }
  size_t m = x.rank() == 2 ? x.shape()[0] : 1;
  size_t k = x.rank() == 2 ? x.shape()[1] : x.shape()[0];
  size_t n = w.shape()[1];
  if (w.shape()[0] != k || b.shape()[0] != n) {
    throw ShapeError("linear: incompatible shapes x" + shape_str(x.shape()) + " w" +
                     shape_str(w.shape()) + " b" + shape_str(b.shape()));
  }
  std::vector<real> out(m * n);
  kernels::matmul_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  for (size_t r = 0; r < m; ++r) {
    kernels::add(out.data() + r * n, b.data().data(), out.data() + r * n, n);
  }
  std::vector<size_t> out_shape =
      x.rank() == 2 ? std::vector<size_t>{m, n} : std::vector<size_t>{n};
  return make_op(std::move(out_shape), std::move(out), {x.node, w.node, b.node},
                 [m, k, n](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pw = *self.parents[1];
                   Node& pb = *self.parents[2];
                   if (px.requires_grad) {
                     px.ensure_grad();
                     kernels::matmul_nt(self.grad.data(), pw.data.data(), px.grad.data(), m, n, k,
                                        /*accumulate=*/true);
                   }
                   if (pw.requires_grad) {
                     pw.ensure_grad();
                     kernels::matmul_tn(px.data.data(), self.grad.data(), pw.grad.data(), m, k, n,
                                        /*accumulate=*/true);
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (size_t r = 0; r < m; ++r) {
                       kernels::add(pb.grad.data(), self.grad.data() + r * n, pb.grad.data(), n);
                     }
                   }
                 });
}

Tensor transpose2d(const Tensor& a) {
  require_defined(a, "transpose2d");
  require_rank(a, 2, "transpose2d");
  size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<real> out(m * n);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return make_op({n, m}, std::move(out), {a.node}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j * m + i];
  });
}

// ---- normalization & activations ----

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  require_defined(x, "layer_norm");
  require_defined(gain, "layer_norm");
  require_defined(bias, "layer_norm");
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  if (x.rank() != 1 && x.rank() != 2) {
    throw ShapeError("layer_norm: input must be rank 1 or 2, got " + shape_str(x.shape()));
  }
  size_t rows = x.rank() == 2 ? x.shape()[0] : 1;
  size_t d = x.rank() == 2 ? x.shape()[1] : x.shape()[0];
  if (gain.shape()[0] != d || bias.shape()[0] != d) {
    throw ShapeError("layer_norm: feature width mismatch x" + shape_str(x.shape()) + " gain" +
                     shape_str(gain.shape()));
  }
  std::vector<real> out(x.size());
  std::vector<real> inv_sigma(rows);
  std::vector<real> xhat(x.size());
  for (size_t r = 0; r < rows; ++r) {
    const real* xr = x.data().data() + r * d;
    real mu = 0;
    for (size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= real(d);
    real var = 0;
    for (size_t j = 0; j < d; ++j) {
      real c = xr[j] - mu;
      var += c * c;
    }
    var /= real(d);
    real is = real(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (size_t j = 0; j < d; ++j) {
      real h = (xr[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x.node, gain.node, bias.node},
                 [rows, d, inv_sigma = std::move(inv_sigma), xhat = std::move(xhat)](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pg = *self.parents[1];
                   Node& pb = *self.parents[2];
                   for (size_t r = 0; r < rows; ++r) {
                     const real* g = self.grad.data() + r * d;
                     const real* h = xhat.data() + r * d;
                     if (pg.requires_grad) {
                       pg.ensure_grad();
                       for (size_t j = 0; j < d; ++j) pg.grad[j] += g[j] * h[j];
                     }
                     if (pb.requires_grad) {
                       pb.ensure_grad();
                       kernels::add(pb.grad.data(), g, pb.grad.data(), d);
                     }
                     if (px.requires_grad) {
                       px.ensure_grad();
                       real mean_u = 0, mean_uh = 0;
                       for (size_t j = 0; j < d; ++j) {
                         real u = g[j] * pg.data[j];
                         mean_u += u;
                         mean_uh += u * h[j];
                       }
                       mean_u /= real(d);
                       mean_uh /= real(d);
                       real* gx = px.grad.data() + r * d;
                       for (size_t j = 0; j < d; ++j) {
                         real u = g[j] * pg.data[j];
                         gx[j] += (u - mean_u - h[j] * mean_uh) * inv_sigma[r];
                       }
                     }
                   }
                 });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  constexpr real kRoot2OverPi = real(0.7978845608028654);
  constexpr real kCubic = real(0.044715);
  std::vector<real> out(x.size());
  for (size_t i = 0; i < out.size(); ++i) {
    real v = x.data()[i];
    real t = std::tanh(kRoot2OverPi * (v + kCubic * v * v * v));
    out[i] = real(0.5) * v * (real(1) + t);
  }
  return make_op(x.shape(), std::move(out), {x.node}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    constexpr real kRoot2OverPi = real(0.7978845608028654);
    constexpr real kCubic = real(0.044715);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      real v = p.data[i];
      real inner = kRoot2OverPi * (v + kCubic * v * v * v);
      real t = std::tanh(inner);
      real dinner = kRoot2OverPi * (real(1) + real(3) * kCubic * v * v);
      real dv = real(0.5) * (real(1) + t) + real(0.5) * v * (real(1) - t * t) * dinner;
      p.grad[i] += self.grad[i] * dv;
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  require_defined(x, "softmax");
  int rank = static_cast<int>(x.rank());
  if (rank == 0) throw ShapeError("softmax: scalar input");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    std::ostringstream os;
    os << "softmax: axis " << axis << " out of range for shape " << shape_str(x.shape());
    throw ShapeError(os.str());
  }
  size_t n = x.shape()[axis];
  size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < rank; ++i) inner *= x.shape()[i];

  std::vector<real> out(x.size());
  std::vector<real> slice(n), soft(n);
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      size_t base = o * n * inner + in;
      for (size_t t = 0; t < n; ++t) slice[t] = x.data()[base + t * inner];
      softmax_1d(slice.data(), soft.data(), n);
      for (size_t t = 0; t < n; ++t) out[base + t * inner] = soft[t];
    }
  }
  return make_op(x.shape(), std::move(out), {x.node}, [outer, n, inner](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t o = 0; o < outer; ++o) {
      for (size_t in = 0; in < inner; ++in) {
        size_t base = o * n * inner + in;
        real gy = 0;
        for (size_t t = 0; t < n; ++t) {
          size_t idx = base + t * inner;
          gy += self.grad[idx] * self.data[idx];
        }
        for (size_t t = 0; t < n; ++t) {
          size_t idx = base + t * inner;
          p.grad[idx] += self.data[idx] * (self.grad[idx] - gy);
        }
      }
    }
  });
}

// ---- gathers & row ops ----

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  require_defined(table, "embedding_rows");
  require_rank(table, 2, "embedding_rows");
  if (ids.empty()) throw ValidationError("embedding_rows: empty id list");
  size_t v = table.shape()[0], d = table.shape()[1];
  for (int id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= v) {
      std::ostringstream os;
      os << "embedding_rows: id " << id << " outside table of " << v << " rows";
      throw ValidationError(os.str());
    }
  }
  std::vector<real> out(ids.size() * d);
  for (size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(table.data().data() + size_t(ids[r]) * d, d, out.data() + r * d);
  }
  return make_op({ids.size(), d}, std::move(out), {table.node}, [ids, d](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t r = 0; r < ids.size(); ++r) {
      kernels::add(p.grad.data() + size_t(ids[r]) * d, self.grad.data() + r * d,
                   p.grad.data() + size_t(ids[r]) * d, d);
    }
  });
}

Tensor index_select(const Tensor& x, const std::vector<int>& ids) {
  require_defined(x, "index_select");
  require_rank(x, 1, "index_select");
  if (ids.empty()) throw ValidationError("index_select: empty id list");
  size_t n = x.shape()[0];
  for (int id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= n) {
      std::ostringstream os;
      os << "index_select: index " << id << " outside length " << n;
      throw ValidationError(os.str());
    }
  }
  std::vector<real> out(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) out[i] = x.data()[size_t(ids[i])];
  return make_op({ids.size()}, std::move(out), {x.node}, [ids](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) p.grad[size_t(ids[i])] += self.grad[i];
  });
}

Tensor row(const Tensor& x, size_t r) {
  require_defined(x, "row");
  require_rank(x, 2, "row");
  size_t rows = x.shape()[0], d = x.shape()[1];
  if (r >= rows) {
    std::ostringstream os;
    os << "row: index " << r << " outside " << rows << " rows";
    throw ShapeError(os.str());
  }
  std::vector<real> out(x.data().begin() + r * d, x.data().begin() + (r + 1) * d);
  return make_op({d}, std::move(out), {x.node}, [r, d](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    kernels::add(p.grad.data() + r * d, self.grad.data(), p.grad.data() + r * d, d);
  });
}

Tensor mean_rows(const Tensor& x) {
  require_defined(x, "mean_rows");
  require_rank(x, 2, "mean_rows");
  size_t rows = x.shape()[0], d = x.shape()[1];
  std::vector<real> out(d, real(0));
  for (size_t r = 0; r < rows; ++r) {
    kernels::add(out.data(), x.data().data() + r * d, out.data(), d);
  }
  real inv = real(1) / real(rows);
  kernels::scale(out.data(), inv, out.data(), d);
  return make_op({d}, std::move(out), {x.node}, [rows, d, inv](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t r = 0; r < rows; ++r) {
      kernels::axpy(inv, self.grad.data(), p.grad.data() + r * d, d);
    }
  });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ValidationError("stack_rows: no rows");
  for (const auto& t : rows) {
    require_defined(t, "stack_rows");
    require_rank(t, 1, "stack_rows");
    if (t.shape() != rows[0].shape()) require_same_shape(t, rows[0], "stack_rows");
  }
  size_t b = rows.size(), d = rows[0].shape()[0];
  std::vector<real> out(b * d);
  std::vector<NodePtr> parents(b);
  for (size_t r = 0; r < b; ++r) {
    std::copy_n(rows[r].data().data(), d, out.data() + r * d);
    parents[r] = rows[r].node;
  }
  return make_op({b, d}, std::move(out), std::move(parents), [d](Node& self) {
    for (size_t r = 0; r < self.parents.size(); ++r) {
      Node& p = *self.parents[r];
      if (p.requires_grad) accumulate(p, self.grad.data() + r * d, d);
    }
  });
}

// ---- attention ----

namespace {

void check_cache_pair(const Tensor& k_cache, const Tensor& v_cache, size_t heads,
                      size_t head_dim) {
  if (k_cache.defined() != v_cache.defined()) {
    throw ShapeError("attend_cached: cache keys/values presence mismatch");
  }
  if (!k_cache.defined()) return;
  require_rank(k_cache, 3, "attend_cached");
  require_rank(v_cache, 3, "attend_cached");
  if (k_cache.shape() != v_cache.shape()) {
    throw ShapeError("attend_cached: cache key/value shapes differ: " +
                     shape_str(k_cache.shape()) + " vs " + shape_str(v_cache.shape()));
  }
  if (k_cache.shape()[0] != heads || k_cache.shape()[2] != head_dim) {
    std::ostringstream os;
    os << "attend_cached: cache shape " << shape_str(k_cache.shape()) << " incompatible with "
       << heads << " heads of width " << head_dim;
    throw ShapeError(os.str());
  }
}

}  // namespace

Tensor attend_cached(const Tensor& q, const Tensor& k_cache, const Tensor& v_cache,
                     const Tensor& k_new, const Tensor& v_new, size_t heads) {
  require_defined(q, "attend_cached");
  require_defined(k_new, "attend_cached");
  require_defined(v_new, "attend_cached");
  require_rank(q, 1, "attend_cached");
  require_same_shape(k_new, q, "attend_cached");
  require_same_shape(v_new, q, "attend_cached");
  size_t d = q.shape()[0];
  if (heads == 0 || d % heads != 0) {
    std::ostringstream os;
    os << "attend_cached: width " << d << " not divisible into " << heads << " heads";
    throw ShapeError(os.str());
  }
  size_t hd = d / heads;
  check_cache_pair(k_cache, v_cache, heads, hd);
  size_t cache_len = k_cache.defined() ? k_cache.shape()[1] : 0;
  size_t len = cache_len + 1;  // cache positions plus the current one
  real inv_scale = real(1) / std::sqrt(real(hd));

  std::vector<real> alphas(heads * len);
  std::vector<real> out(d, real(0));
  std::vector<real> scores(len);
  for (size_t h = 0; h < heads; ++h) {
    const real* qh = q.data().data() + h * hd;
    for (size_t t = 0; t < cache_len; ++t) {
      const real* kt = k_cache.data().data() + (h * cache_len + t) * hd;
      scores[t] = kernels::dot(qh, kt, hd) * inv_scale;
    }
    scores[cache_len] = kernels::dot(qh, k_new.data().data() + h * hd, hd) * inv_scale;
    softmax_1d(scores.data(), alphas.data() + h * len, len);
    real* oh = out.data() + h * hd;
    const real* ah = alphas.data() + h * len;
    for (size_t t = 0; t < cache_len; ++t) {
      kernels::axpy(ah[t], v_cache.data().data() + (h * cache_len + t) * hd, oh, hd);
    }
    kernels::axpy(ah[cache_len], v_new.data().data() + h * hd, oh, hd);
  }

  std::vector<NodePtr> parents{q.node, k_new.node, v_new.node};
  if (k_cache.defined()) {
    parents.push_back(k_cache.node);
    parents.push_back(v_cache.node);
  }
  return make_op(
      {d}, std::move(out), std::move(parents),
      [heads, hd, cache_len, len, inv_scale, alphas = std::move(alphas)](Node& self) {
        Node& pq = *self.parents[0];
        Node& pkn = *self.parents[1];
        Node& pvn = *self.parents[2];
        Node* pkc = self.parents.size() == 5 ? self.parents[3].get() : nullptr;
        Node* pvc = self.parents.size() == 5 ? self.parents[4].get() : nullptr;
        for (Node* p : {&pq, &pkn, &pvn}) {
          if (p->requires_grad) p->ensure_grad();
        }
        if (pkc && pkc->requires_grad) pkc->ensure_grad();
        if (pvc && pvc->requires_grad) pvc->ensure_grad();

        std::vector<real> dalpha(len), dscore(len);
        for (size_t h = 0; h < heads; ++h) {
          const real* g = self.grad.data() + h * hd;
          const real* ah = alphas.data() + h * len;
          // d alpha_t = g . v_t ; d v_t += alpha_t g
          for (size_t t = 0; t < cache_len; ++t) {
            const real* vt = pvc->data.data() + (h * cache_len + t) * hd;
            dalpha[t] = kernels::dot(g, vt, hd);
            if (pvc->requires_grad) {
              kernels::axpy(ah[t], g, pvc->grad.data() + (h * cache_len + t) * hd, hd);
            }
          }
          {
            const real* vn = pvn.data.data() + h * hd;
            dalpha[cache_len] = kernels::dot(g, vn, hd);
            if (pvn.requires_grad) {
              kernels::axpy(ah[cache_len], g, pvn.grad.data() + h * hd, hd);
            }
          }
          // softmax backward
          real gy = 0;
          for (size_t t = 0; t < len; ++t) gy += dalpha[t] * ah[t];
          for (size_t t = 0; t < len; ++t) dscore[t] = ah[t] * (dalpha[t] - gy) * inv_scale;
          // d q += sum_t dscore_t k_t ; d k_t += dscore_t q
          const real* qh = pq.data.data() + h * hd;
          for (size_t t = 0; t < cache_len; ++t) {
            const real* kt = pkc->data.data() + (h * cache_len + t) * hd;
            if (pq.requires_grad) kernels::axpy(dscore[t], kt, pq.grad.data() + h * hd, hd);
            if (pkc->requires_grad) {
              kernels::axpy(dscore[t], qh, pkc->grad.data() + (h * cache_len + t) * hd, hd);
            }
          }
          const real* kn = pkn.data.data() + h * hd;
          if (pq.requires_grad) kernels::axpy(dscore[cache_len], kn, pq.grad.data() + h * hd, hd);
          if (pkn.requires_grad) {
            kernels::axpy(dscore[cache_len], qh, pkn.grad.data() + h * hd, hd);
          }
        }
      });
}

Tensor attend_causal(const Tensor& q, const Tensor& k, const Tensor& v, size_t heads) {
  require_defined(q, "attend_causal");
  require_defined(k, "attend_causal");
  require_defined(v, "attend_causal");
  require_rank(q, 2, "attend_causal");
  require_same_shape(k, q, "attend_causal");
  require_same_shape(v, q, "attend_causal");
  size_t t_len = q.shape()[0], d = q.shape()[1];
  if (heads == 0 || d % heads != 0) {
    std::ostringstream os;
    os << "attend_causal: width " << d << " not divisible into " << heads << " heads";
    throw ShapeError(os.str());
  }
  size_t hd = d / heads;
  real inv_scale = real(1) / std::sqrt(real(hd));

  // alphas[h][i][j] for j <= i, stored dense T*T per head (upper triangle zero).
  std::vector<real> alphas(heads * t_len * t_len, real(0));
  std::vector<real> out(t_len * d, real(0));
  std::vector<real> scores(t_len);
  for (size_t h = 0; h < heads; ++h) {
    for (size_t i = 0; i < t_len; ++i) {
      const real* qi = q.data().data() + i * d + h * hd;
      for (size_t j = 0; j <= i; ++j) {
        scores[j] = kernels::dot(qi, k.data().data() + j * d + h * hd, hd) * inv_scale;
      }
      real* ai = alphas.data() + (h * t_len + i) * t_len;
      softmax_1d(scores.data(), ai, i + 1);
      real* oi = out.data() + i * d + h * hd;
      for (size_t j = 0; j <= i; ++j) {
        kernels::axpy(ai[j], v.data().data() + j * d + h * hd, oi, hd);
      }
    }
  }
  return make_op(
      {t_len, d}, std::move(out), {q.node, k.node, v.node},
      [heads, hd, t_len, d, inv_scale, alphas = std::move(alphas)](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        for (Node* p : {&pq, &pk, &pv}) {
          if (p->requires_grad) p->ensure_grad();
        }
        std::vector<real> dalpha(t_len), dscore(t_len);
        for (size_t h = 0; h < heads; ++h) {
          for (size_t i = 0; i < t_len; ++i) {
            const real* g = self.grad.data() + i * d + h * hd;
            const real* ai = alphas.data() + (h * t_len + i) * t_len;
            for (size_t j = 0; j <= i; ++j) {
              dalpha[j] = kernels::dot(g, pv.data.data() + j * d + h * hd, hd);
              if (pv.requires_grad) {
                kernels::axpy(ai[j], g, pv.grad.data() + j * d + h * hd, hd);
              }
            }
            real gy = 0;
            for (size_t j = 0; j <= i; ++j) gy += dalpha[j] * ai[j];
            for (size_t j = 0; j <= i; ++j) dscore[j] = ai[j] * (dalpha[j] - gy) * inv_scale;
            const real* qi = pq.data.data() + i * d + h * hd;
            for (size_t j = 0; j <= i; ++j) {
              if (pq.requires_grad) {
                kernels::axpy(dscore[j], pk.data.data() + j * d + h * hd,
                              pq.grad.data() + i * d + h * hd, hd);
              }
              if (pk.requires_grad) {
                kernels::axpy(dscore[j], qi, pk.grad.data() + j * d + h * hd, hd);
              }
            }
          }
        }
      });
}

// ---- reductions ----

Scalar sum(const Tensor& x) {
  require_defined(x, "sum");
  real acc = 0;
  for (real v : x.data()) acc += v;
  return make_scalar_op(acc, {x.node}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    real g = self.grad[0];
    for (auto& gv : p.grad) gv += g;
  });
}

Scalar mean(const Tensor& x) {
  require_defined(x, "mean");
  real inv = real(1) / real(x.size());
  real acc = 0;
  for (real v : x.data()) acc += v;
  return make_scalar_op(acc * inv, {x.node}, [inv](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    real g = self.grad[0] * inv;
    for (auto& gv : p.grad) gv += g;
  });
}

Scalar dot(const Tensor& u, const Tensor& v) {
  require_defined(u, "dot");
  require_defined(v, "dot");
  require_same_shape(u, v, "dot");
  real s = kernels::dot(u.data().data(), v.data().data(), u.size());
  return make_scalar_op(s, {u.node, v.node}, [](Node& self) {
    Node& pu = *self.parents[0];
    Node& pv = *self.parents[1];
    real g = self.grad[0];
    if (pu.requires_grad) {
      pu.ensure_grad();
      kernels::axpy(g, pv.data.data(), pu.grad.data(), pu.grad.size());
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      kernels::axpy(g, pu.data.data(), pv.grad.data(), pv.grad.size());
    }
  });
}

Scalar pick(const Tensor& x, size_t i) {
  require_defined(x, "pick");
  if (i >= x.size()) {
    std::ostringstream os;
    os << "pick: index " << i << " outside " << x.size() << " elements";
    throw ShapeError(os.str());
  }
  return make_scalar_op(x.data()[i], {x.node}, [i](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad[i] += self.grad[0];
  });
}

Scalar cosine_similarity(const Tensor& u, const Tensor& v) {
  require_defined(u, "cosine_similarity");
  require_defined(v, "cosine_similarity");
  require_same_shape(u, v, "cosine_similarity");
  size_t n = u.size();
  real uu = kernels::dot(u.data().data(), u.data().data(), n);
  real vv = kernels::dot(v.data().data(), v.data().data(), n);
  if (uu == real(0) || vv == real(0)) {
    throw ValidationError("cosine_similarity: zero-norm input");
  }
  real nu = std::sqrt(uu), nv = std::sqrt(vv);
  real uv = kernels::dot(u.data().data(), v.data().data(), n);
  real c = uv / (nu * nv);
  return make_scalar_op(c, {u.node, v.node}, [nu, nv, c](Node& self) {
    Node& pu = *self.parents[0];
    Node& pv = *self.parents[1];
    real g = self.grad[0];
    size_t n = pu.data.size();
    if (pu.requires_grad) {
      pu.ensure_grad();
      real a = g / (nu * nv), b = g * c / (nu * nu);
      for (size_t i = 0; i < n; ++i) pu.grad[i] += a * pv.data[i] - b * pu.data[i];
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      real a = g / (nu * nv), b = g * c / (nv * nv);
      for (size_t i = 0; i < n; ++i) pv.grad[i] += a * pu.data[i] - b * pv.data[i];
    }
  });
}

Scalar cross_entropy(const Tensor& logits, const Tensor& target_probs) {
  require_defined(logits, "cross_entropy");
  require_defined(target_probs, "cross_entropy");
  require_rank(logits, 1, "cross_entropy");
  require_same_shape(target_probs, logits, "cross_entropy");
  size_t n = logits.size();
  real total = 0;
  for (real t : target_probs.data()) {
    if (t < real(-1e-6)) throw ValidationError("cross_entropy: negative target probability");
    total += t;
  }
  if (std::fabs(total - real(1)) > real(1e-5)) {
    std::ostringstream os;
    os << "cross_entropy: target probabilities sum to " << total;
    throw ValidationError(os.str());
  }
  real lse = log_sum_exp(logits.data().data(), n);
  real ce = lse - kernels::dot(logits.data().data(), target_probs.data().data(), n);
  // Target is a constant: only the logits join the tape.
  auto target = target_probs.node;
  return make_scalar_op(ce, {logits.node}, [target](Node& self) {
    Node& pl = *self.parents[0];
    if (!pl.requires_grad) return;
    pl.ensure_grad();
    size_t n = pl.data.size();
    std::vector<real> p(n);
    softmax_1d(pl.data.data(), p.data(), n);
    real g = self.grad[0];
    for (size_t i = 0; i < n; ++i) pl.grad[i] += g * (p[i] - target->data[i]);
  });
}

Scalar cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
  require_defined(logits, "cross_entropy_rows");
  require_rank(logits, 2, "cross_entropy_rows");
  size_t t_len = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != t_len) {
    std::ostringstream os;
    os << "cross_entropy_rows: " << targets.size() << " targets for " << t_len << " rows";
    throw ShapeError(os.str());
  }
  for (int id : targets) {
    if (id < 0 || static_cast<size_t>(id) >= v) {
      std::ostringstream os;
      os << "cross_entropy_rows: target id " << id << " outside vocab of " << v;
      throw ValidationError(os.str());
    }
  }
  real acc = 0;
  for (size_t r = 0; r < t_len; ++r) {
    const real* lr = logits.data().data() + r * v;
    acc += log_sum_exp(lr, v) - lr[size_t(targets[r])];
  }
  real inv = real(1) / real(t_len);
  return make_scalar_op(acc * inv, {logits.node}, [targets, v, inv](Node& self) {
    Node& pl = *self.parents[0];
    if (!pl.requires_grad) return;
    pl.ensure_grad();
    size_t t_len = targets.size();
    std::vector<real> p(v);
    real g = self.grad[0] * inv;
    for (size_t r = 0; r < t_len; ++r) {
      const real* lr = pl.data.data() + r * v;
      softmax_1d(lr, p.data(), v);
      real* gr = pl.grad.data() + r * v;
      for (size_t j = 0; j < v; ++j) gr[j] += g * p[j];
      gr[size_t(targets[r])] -= g;
    }
  });
}

// ---- scalar ops ----

namespace {

void require_scalar(const Scalar& s, const char* op) {
  if (!s.defined()) throw ShapeError(std::string(op) + ": undefined scalar operand");
}

}  // namespace

Scalar add(const Scalar& a, const Scalar& b) {
  require_scalar(a, "add");
  require_scalar(b, "add");
  return make_scalar_op(a.value() + b.value(), {a.node, b.node}, [](Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        p->grad[0] += self.grad[0];
      }
    }
  });
}

Scalar sub(const Scalar& a, const Scalar& b) {
  require_scalar(a, "sub");
  require_scalar(b, "sub");
  return make_scalar_op(a.value() - b.value(), {a.node, b.node}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad[0] += self.grad[0];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      pb.grad[0] -= self.grad[0];
    }
  });
}

Scalar mul(const Scalar& a, const Scalar& b) {
  require_scalar(a, "mul");
  require_scalar(b, "mul");
  return make_scalar_op(a.value() * b.value(), {a.node, b.node}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad[0] += self.grad[0] * pb.data[0];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      pb.grad[0] += self.grad[0] * pa.data[0];
    }
  });
}

Scalar scale(const Scalar& a, real alpha) {
  require_scalar(a, "scale");
  return make_scalar_op(a.value() * alpha, {a.node}, [alpha](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad[0] += self.grad[0] * alpha;
  });
}

Scalar exp(const Scalar& a) {
  require_scalar(a, "exp");
  real v = std::exp(a.value());
  return make_scalar_op(v, {a.node}, [v](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad[0] += self.grad[0] * v;
  });
}

Scalar neg_log_clamped(const Scalar& p, real floor) {
  require_scalar(p, "neg_log_clamped");
  real v = p.value();
  bool clamped = v < floor;
  real loss = -std::log(clamped ? floor : v);
  return make_scalar_op(loss, {p.node}, [clamped, v](Node& self) {
    Node& pp = *self.parents[0];
    if (!pp.requires_grad) return;
    pp.ensure_grad();
    // Past the clamp the loss is constant in p.
    if (!clamped) pp.grad[0] -= self.grad[0] / v;
  });
}

// ---- backward ----

void backward(const Scalar& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined scalar");
  if (!loss.node->requires_grad) throw UsageError("backward on a detached scalar");

  // Iterative post-order over the requires_grad subgraph: leaves first.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack{{loss.node.get(), 0}};
  visited.insert(loss.node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && visited.insert(p).second) {
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  loss.node->ensure_grad();
  loss.node->grad[0] += real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->data.size()) n->backward_fn(*n);
  }
}

}  // namespace cachesteer

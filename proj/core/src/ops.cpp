#include "spotdiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "spotdiff/error.hpp"

namespace spotdiff::ops {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

void require_rank(const Tensor& x, int rank, const char* op) {
  if (x.ndim() != rank) {
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                      shape_str(x.shape()));
  }
}

bool wants(const Node* n) { return n != nullptr && n->requires_grad; }

double silu_value(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = detail::make_result(a.shape(), {&a, &b});
  out->value.resize(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] + bv[i];
  if (out->requires_grad) {
    Node *self = out.get(), *na = a.node(), *nb = b.node();
    out->backward = [self, na, nb] {
      for (Node* n : {na, nb}) {
        if (!wants(n)) continue;
        auto& g = n->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
      }
    };
  }
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto out = detail::make_result(a.shape(), {&a, &b});
  out->value.resize(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] - bv[i];
  if (out->requires_grad) {
    Node *self = out.get(), *na = a.node(), *nb = b.node();
    out->backward = [self, na, nb] {
      if (wants(na)) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
      }
      if (wants(nb)) {
        auto& g = nb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self->grad[i];
      }
    };
  }
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = detail::make_result(a.shape(), {&a, &b});
  out->value.resize(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] * bv[i];
  if (out->requires_grad) {
    Node *self = out.get(), *na = a.node(), *nb = b.node();
    out->backward = [self, na, nb] {
      if (wants(na)) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i] * nb->value[i];
      }
      if (wants(nb)) {
        auto& g = nb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i] * na->value[i];
      }
    };
  }
  return Tensor(out);
}

Tensor scale(const Tensor& a, double s) {
  auto out = detail::make_result(a.shape(), {&a});
  out->value.resize(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] * s;
  if (out->requires_grad) {
    Node *self = out.get(), *na = a.node();
    out->backward = [self, na, s] {
      auto& g = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i] * s;
    };
  }
  return Tensor(out);
}

Tensor add_scalar(const Tensor& a, double s) {
  auto out = detail::make_result(a.shape(), {&a});
  out->value.resize(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] + s;
  if (out->requires_grad) {
    Node *self = out.get(), *na = a.node();
    out->backward = [self, na] {
      auto& g = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
    };
  }
  return Tensor(out);
}

Tensor silu(const Tensor& x) {
  auto out = detail::make_result(x.shape(), {&x});
  out->value.resize(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = silu_value(xv[i]);
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    out->backward = [self, nx] {
      auto& g = nx->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = nx->value[i];
        const double s = 1.0 / (1.0 + std::exp(-v));
        g[i] += self->grad[i] * (s * (1.0 + v * (1.0 - s)));
      }
    };
  }
  return Tensor(out);
}

namespace {

struct BroadcastLayout {
  std::int64_t outer = 1, mid = 1, inner = 1;
};

BroadcastLayout broadcast_layout(const Tensor& x, const Tensor& y, int axis, const char* op) {
  const int xr = x.ndim(), yr = y.ndim();
  if (axis < 0 || axis + yr > xr) {
    throw ConfigError(std::string(op) + ": cannot broadcast " + shape_str(y.shape()) + " into " +
                      shape_str(x.shape()) + " at axis " + std::to_string(axis));
  }
  BroadcastLayout l;
  for (int i = 0; i < axis; ++i) l.outer *= x.shape()[i];
  for (int i = 0; i < yr; ++i) {
    if (x.shape()[axis + i] != y.shape()[i]) {
      throw ConfigError(std::string(op) + ": cannot broadcast " + shape_str(y.shape()) +
                        " into " + shape_str(x.shape()) + " at axis " + std::to_string(axis));
    }
    l.mid *= y.shape()[i];
  }
  for (int i = axis + yr; i < xr; ++i) l.inner *= x.shape()[i];
  return l;
}

}  // namespace

Tensor add_broadcast(const Tensor& x, const Tensor& y, int axis) {
  const BroadcastLayout l = broadcast_layout(x, y, axis, "add_broadcast");
  auto out = detail::make_result(x.shape(), {&x, &y});
  out->value.resize(x.numel());
  auto xv = x.data(), yv = y.data();
  std::int64_t idx = 0;
  for (std::int64_t o = 0; o < l.outer; ++o)
    for (std::int64_t m = 0; m < l.mid; ++m)
      for (std::int64_t i = 0; i < l.inner; ++i, ++idx) out->value[idx] = xv[idx] + yv[m];
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node(), *ny = y.node();
    out->backward = [self, nx, ny, l] {
      if (wants(nx)) {
        auto& g = nx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
      }
      if (wants(ny)) {
        auto& g = ny->grad_buffer();
        std::int64_t idx = 0;
        for (std::int64_t o = 0; o < l.outer; ++o)
          for (std::int64_t m = 0; m < l.mid; ++m) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < l.inner; ++i, ++idx) acc += self->grad[idx];
            g[m] += acc;
          }
      }
    };
  }
  return Tensor(out);
}

Tensor mul_broadcast(const Tensor& x, const Tensor& y, int axis) {
  const BroadcastLayout l = broadcast_layout(x, y, axis, "mul_broadcast");
  auto out = detail::make_result(x.shape(), {&x, &y});
  out->value.resize(x.numel());
  auto xv = x.data(), yv = y.data();
  std::int64_t idx = 0;
  for (std::int64_t o = 0; o < l.outer; ++o)
    for (std::int64_t m = 0; m < l.mid; ++m)
      for (std::int64_t i = 0; i < l.inner; ++i, ++idx) out->value[idx] = xv[idx] * yv[m];
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node(), *ny = y.node();
    out->backward = [self, nx, ny, l] {
      if (wants(nx)) {
        auto& g = nx->grad_buffer();
        std::int64_t idx = 0;
        for (std::int64_t o = 0; o < l.outer; ++o)
          for (std::int64_t m = 0; m < l.mid; ++m)
            for (std::int64_t i = 0; i < l.inner; ++i, ++idx) g[idx] += self->grad[idx] * ny->value[m];
      }
      if (wants(ny)) {
        auto& g = ny->grad_buffer();
        std::int64_t idx = 0;
        for (std::int64_t o = 0; o < l.outer; ++o)
          for (std::int64_t m = 0; m < l.mid; ++m) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < l.inner; ++i, ++idx) acc += self->grad[idx] * nx->value[idx];
            g[m] += acc;
          }
      }
    };
  }
  return Tensor(out);
}

Tensor sum(const Tensor& x) {
  auto out = detail::make_result({}, {&x});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out->value = {acc};
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    out->backward = [self, nx] {
      auto& g = nx->grad_buffer();
      for (auto& gi : g) gi += self->grad[0];
    };
  }
  return Tensor(out);
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(std::max<std::int64_t>(x.numel(), 1));
  return scale(sum(x), 1.0 / n);
}

Tensor abs_sum(const Tensor& x) {
  auto out = detail::make_result({}, {&x});
  double acc = 0.0;
  for (double v : x.data()) acc += std::abs(v);
  out->value = {acc};
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    out->backward = [self, nx] {
      auto& g = nx->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = nx->value[i];
        g[i] += self->grad[0] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
      }
    };
  }
  return Tensor(out);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  auto out = detail::make_result({}, {&a, &b});
  const double n = static_cast<double>(std::max<std::int64_t>(a.numel(), 1));
  double acc = 0.0;
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  out->value = {acc / n};
  if (out->requires_grad) {
    Node *self = out.get(), *na = a.node(), *nb = b.node();
    out->backward = [self, na, nb, n] {
      const double s = 2.0 * self->grad[0] / n;
      if (wants(na)) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (na->value[i] - nb->value[i]);
      }
      if (wants(nb)) {
        auto& g = nb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= s * (na->value[i] - nb->value[i]);
      }
    };
  }
  return Tensor(out);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ConfigError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  }
  auto out = detail::make_result({n, m}, {&a, &b});
  out->value.resize(static_cast<std::size_t>(n) * m);
  MapMat(out->value.data(), n, m).noalias() = CMapMat(a.data().data(), n, k) * CMapMat(b.data().data(), k, m);
  if (out->requires_grad) {
    Node *self = out.get(), *na = a.node(), *nb = b.node();
    out->backward = [self, na, nb, n, k, m] {
      CMapMat gout(self->grad.data(), n, m);
      if (wants(na)) {
        MapMat(na->grad_buffer().data(), n, k).noalias() += gout * CMapMat(nb->value.data(), k, m).transpose();
      }
      if (wants(nb)) {
        MapMat(nb->grad_buffer().data(), k, m).noalias() += CMapMat(na->value.data(), n, k).transpose() * gout;
      }
    };
  }
  return Tensor(out);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "linear");
  const int in = w.dim(0), out_dim = w.dim(1);
  if (x.ndim() < 1 || x.dim(-1) != in) {
    throw ConfigError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                      shape_str(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  const int rows = static_cast<int>(x.numel() / in);
  Tensor y = matmul(x.reshape({rows, in}), w);
  if (b.defined()) y = add_broadcast(y, b, 1);
  return y.reshape(out_shape);
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const int batch = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) {
    throw ConfigError("bmm: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  auto out = detail::make_result({batch, n, m}, {&a, &b});
  out->value.resize(static_cast<std::size_t>(batch) * n * m);
  for (int i = 0; i < batch; ++i) {
    MapMat(out->value.data() + static_cast<std::size_t>(i) * n * m, n, m).noalias() =
        CMapMat(a.data().data() + static_cast<std::size_t>(i) * n * k, n, k) *
        CMapMat(b.data().data() + static_cast<std::size_t>(i) * k * m, k, m);
  }
  if (out->requires_grad) {
    Node *self = out.get(), *na = a.node(), *nb = b.node();
    out->backward = [self, na, nb, batch, n, k, m] {
      for (int i = 0; i < batch; ++i) {
        CMapMat gout(self->grad.data() + static_cast<std::size_t>(i) * n * m, n, m);
        if (wants(na)) {
          MapMat(na->grad_buffer().data() + static_cast<std::size_t>(i) * n * k, n, k).noalias() +=
              gout * CMapMat(nb->value.data() + static_cast<std::size_t>(i) * k * m, k, m).transpose();
        }
        if (wants(nb)) {
          MapMat(nb->grad_buffer().data() + static_cast<std::size_t>(i) * k * m, k, m).noalias() +=
              CMapMat(na->value.data() + static_cast<std::size_t>(i) * n * k, n, k).transpose() * gout;
        }
      }
    };
  }
  return Tensor(out);
}

Tensor transpose_last2(const Tensor& x) {
  require_rank(x, 3, "transpose_last2");
  const int batch = x.dim(0), n = x.dim(1), m = x.dim(2);
  auto out = detail::make_result({batch, m, n}, {&x});
  out->value.resize(x.numel());
  auto xv = x.data();
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j)
        out->value[(static_cast<std::size_t>(b) * m + j) * n + i] = xv[(static_cast<std::size_t>(b) * n + i) * m + j];
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    out->backward = [self, nx, batch, n, m] {
      auto& g = nx->grad_buffer();
      for (int b = 0; b < batch; ++b)
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j)
            g[(static_cast<std::size_t>(b) * n + i) * m + j] += self->grad[(static_cast<std::size_t>(b) * m + j) * n + i];
    };
  }
  return Tensor(out);
}

Tensor swap_axes12(const Tensor& x) { return transpose_last2(x); }

Tensor softmax_last(const Tensor& x) {
  if (x.ndim() < 1) throw ConfigError("softmax_last: scalar input");
  const int d = x.dim(-1);
  const std::int64_t rows = x.numel() / std::max(d, 1);
  auto out = detail::make_result(x.shape(), {&x});
  out->value.resize(x.numel());
  auto xv = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double* o = out->value.data() + r * d;
    double mx = in[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (int j = 0; j < d; ++j) o[j] /= z;
  }
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    out->backward = [self, nx, rows, d] {
      auto& g = nx->grad_buffer();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* y = self->value.data() + r * d;
        const double* gy = self->grad.data() + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += gy[j] * y[j];
        for (int j = 0; j < d; ++j) g[r * d + j] += y[j] * (gy[j] - dot);
      }
    };
  }
  return Tensor(out);
}

namespace {

struct ConvGeometry {
  int batch, cin, h, w, cout, k, stride, pad, hout, wout;
  std::int64_t kdim() const { return static_cast<std::int64_t>(cin) * k * k; }
  std::int64_t npix() const { return static_cast<std::int64_t>(hout) * wout; }
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const std::int64_t row = (static_cast<std::int64_t>(c) * g.k + ky) * g.k + kx;
        double* dst = col + row * g.npix();
        for (int oy = 0; oy < g.hout; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int ox = 0; ox < g.wout; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[oy * g.wout + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                                        ? x[(static_cast<std::int64_t>(c) * g.h + iy) * g.w + ix]
                                        : 0.0;
          }
        }
      }
}

void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const std::int64_t row = (static_cast<std::int64_t>(c) * g.k + ky) * g.k + kx;
        const double* src = col + row * g.npix();
        for (int oy = 0; oy < g.hout; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.wout; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            x[(static_cast<std::int64_t>(c) * g.h + iy) * g.w + ix] += src[oy * g.wout + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.k = w.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (w.dim(1) != g.cin || w.dim(3) != g.k) {
    throw ConfigError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                      shape_str(x.shape()));
  }
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != g.cout)) {
    throw ConfigError("conv2d: bias " + shape_str(b.shape()) + " incompatible with weight");
  }
  g.hout = (g.h + 2 * padding - g.k) / stride + 1;
  g.wout = (g.w + 2 * padding - g.k) / stride + 1;
  if (g.hout <= 0 || g.wout <= 0) throw ConfigError("conv2d: input too small " + shape_str(x.shape()));

  auto out = detail::make_result({g.batch, g.cout, g.hout, g.wout}, {&x, &w, &b});
  out->value.assign(static_cast<std::size_t>(g.batch) * g.cout * g.npix(), 0.0);
  const bool keep_cols = out->requires_grad && w.requires_grad();
  std::vector<double> cols(static_cast<std::size_t>(keep_cols ? g.batch : 1) * g.kdim() * g.npix());
  CMapMat wmat(w.data().data(), g.cout, g.kdim());
  const std::int64_t in_stride = static_cast<std::int64_t>(g.cin) * g.h * g.w;
  const std::int64_t out_stride = static_cast<std::int64_t>(g.cout) * g.npix();
  for (int n = 0; n < g.batch; ++n) {
    double* col = cols.data() + (keep_cols ? n * g.kdim() * g.npix() : 0);
    if (g.k == 1 && g.stride == 1 && g.pad == 0) {
      std::copy_n(x.data().data() + n * in_stride, in_stride, col);
    } else {
      im2col(x.data().data() + n * in_stride, g, col);
    }
    MapMat(out->value.data() + n * out_stride, g.cout, g.npix()).noalias() =
        wmat * CMapMat(col, g.kdim(), g.npix());
  }
  if (b.defined()) {
    auto bv = b.data();
    for (int n = 0; n < g.batch; ++n)
      for (int c = 0; c < g.cout; ++c) {
        double* o = out->value.data() + n * out_stride + c * g.npix();
        for (std::int64_t p = 0; p < g.npix(); ++p) o[p] += bv[c];
      }
  }
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node(), *nw = w.node();
    Node* nb = b.defined() ? b.node() : nullptr;
    out->backward = [self, nx, nw, nb, g, in_stride, out_stride, cols = std::move(cols)] {
      if (wants(nw)) {
        MapMat gw(nw->grad_buffer().data(), g.cout, g.kdim());
        for (int n = 0; n < g.batch; ++n) {
          gw.noalias() += CMapMat(self->grad.data() + n * out_stride, g.cout, g.npix()) *
                          CMapMat(cols.data() + n * g.kdim() * g.npix(), g.kdim(), g.npix()).transpose();
        }
      }
      if (wants(nb)) {
        auto& gb = nb->grad_buffer();
        for (int n = 0; n < g.batch; ++n)
          for (int c = 0; c < g.cout; ++c) {
            const double* go = self->grad.data() + n * out_stride + c * g.npix();
            double acc = 0.0;
            for (std::int64_t p = 0; p < g.npix(); ++p) acc += go[p];
            gb[c] += acc;
          }
      }
      if (wants(nx)) {
        auto& gx = nx->grad_buffer();
        CMapMat wmat(nw->value.data(), g.cout, g.kdim());
        RowMat dcol(g.kdim(), g.npix());
        for (int n = 0; n < g.batch; ++n) {
          dcol.noalias() = wmat.transpose() * CMapMat(self->grad.data() + n * out_stride, g.cout, g.npix());
          if (g.k == 1 && g.stride == 1 && g.pad == 0) {
            double* dst = gx.data() + n * in_stride;
            for (std::int64_t i = 0; i < in_stride; ++i) dst[i] += dcol.data()[i];
          } else {
            col2im_add(dcol.data(), g, gx.data() + n * in_stride);
          }
        }
      }
    };
  }
  return Tensor(out);
}

namespace {

// Normalizes contiguous chunks of `chunk` elements, then applies a per-channel
// affine where channel_of(i) maps the position inside a chunk to its channel.
template <typename ChannelOf>
Tensor chunk_normalize(const Tensor& x, std::int64_t chunk, const Tensor& gamma, const Tensor& beta,
                       double eps, ChannelOf channel_of) {
  const std::int64_t nchunks = x.numel() / chunk;
  auto out = detail::make_result(x.shape(), {&x, &gamma, &beta});
  out->value.resize(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(nchunks);
  auto xv = x.data();
  const double* gv = gamma.defined() ? gamma.data().data() : nullptr;
  const double* bv = beta.defined() ? beta.data().data() : nullptr;
  for (std::int64_t c = 0; c < nchunks; ++c) {
    const double* in = xv.data() + c * chunk;
    double mu = 0.0;
    for (std::int64_t i = 0; i < chunk; ++i) mu += in[i];
    mu /= static_cast<double>(chunk);
    double var = 0.0;
    for (std::int64_t i = 0; i < chunk; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(chunk);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[c] = is;
    for (std::int64_t i = 0; i < chunk; ++i) {
      const double xh = (in[i] - mu) * is;
      xhat[c * chunk + i] = xh;
      const int ch = channel_of(i);
      out->value[c * chunk + i] = xh * (gv ? gv[ch] : 1.0) + (bv ? bv[ch] : 0.0);
    }
  }
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    Node* ng = gamma.defined() ? gamma.node() : nullptr;
    Node* nb = beta.defined() ? beta.node() : nullptr;
    out->backward = [self, nx, ng, nb, chunk, nchunks, channel_of, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)] {
      const double* gy = self->grad.data();
      if (wants(ng)) {
        auto& gg = ng->grad_buffer();
        for (std::int64_t c = 0; c < nchunks; ++c)
          for (std::int64_t i = 0; i < chunk; ++i) gg[channel_of(i)] += gy[c * chunk + i] * xhat[c * chunk + i];
      }
      if (wants(nb)) {
        auto& gb = nb->grad_buffer();
        for (std::int64_t c = 0; c < nchunks; ++c)
          for (std::int64_t i = 0; i < chunk; ++i) gb[channel_of(i)] += gy[c * chunk + i];
      }
      if (wants(nx)) {
        auto& gx = nx->grad_buffer();
        const double* gamma_v = ng ? ng->value.data() : nullptr;
        std::vector<double> dxhat(chunk);
        for (std::int64_t c = 0; c < nchunks; ++c) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::int64_t i = 0; i < chunk; ++i) {
            const double d = gy[c * chunk + i] * (gamma_v ? gamma_v[channel_of(i)] : 1.0);
            dxhat[i] = d;
            mean_d += d;
            mean_dx += d * xhat[c * chunk + i];
          }
          mean_d /= static_cast<double>(chunk);
          mean_dx /= static_cast<double>(chunk);
          for (std::int64_t i = 0; i < chunk; ++i) {
            gx[c * chunk + i] += inv_std[c] * (dxhat[i] - mean_d - xhat[c * chunk + i] * mean_dx);
          }
        }
      }
    };
  }
  return Tensor(out);
}

}  // namespace

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 4, "group_norm");
  const int channels = x.dim(1);
  if (groups <= 0 || channels % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  const std::int64_t chunk = (channels / groups) * hw;
  // Each (batch, group) block is contiguous in NCHW, so normalize chunks
  // without affine and apply the per-channel affine afterwards.
  Tensor normalized = chunk_normalize(x, chunk, Tensor(), Tensor(), eps, [](std::int64_t) { return 0; });
  if (gamma.defined()) normalized = mul_broadcast(normalized, gamma, 1);
  if (beta.defined()) normalized = add_broadcast(normalized, beta, 1);
  return normalized;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int d = x.dim(-1);
  return chunk_normalize(x, d, gamma, beta, eps, [](std::int64_t i) { return static_cast<int>(i); });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const int batch = x.dim(0), channels = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  auto out = detail::make_result({batch, channels}, {&x});
  out->value.resize(static_cast<std::size_t>(batch) * channels);
  auto xv = x.data();
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(batch) * channels; ++r) {
    double acc = 0.0;
    for (std::int64_t p = 0; p < hw; ++p) acc += xv[r * hw + p];
    out->value[r] = acc / static_cast<double>(hw);
  }
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    out->backward = [self, nx, hw] {
      auto& g = nx->grad_buffer();
      for (std::size_t r = 0; r < self->value.size(); ++r) {
        const double s = self->grad[r] / static_cast<double>(hw);
        for (std::int64_t p = 0; p < hw; ++p) g[r * hw + p] += s;
      }
    };
  }
  return Tensor(out);
}

Tensor upsample2x(const Tensor& x) {
  require_rank(x, 4, "upsample2x");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto out = detail::make_result({b, c, 2 * h, 2 * w}, {&x});
  out->value.resize(static_cast<std::size_t>(b) * c * 4 * h * w);
  auto xv = x.data();
  const std::int64_t planes = static_cast<std::int64_t>(b) * c;
  for (std::int64_t p = 0; p < planes; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out->value[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    out->backward = [self, nx, planes, h, w] {
      auto& g = nx->grad_buffer();
      for (std::int64_t p = 0; p < planes; ++p)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx)
            g[(p * h + y / 2) * w + xx / 2] += self->grad[(p * 2 * h + y) * 2 * w + xx];
    };
  }
  return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ConfigError("concat: no inputs");
  const int rank = xs[0].ndim();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ConfigError("concat: axis out of range");
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != rank) throw ConfigError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && t.shape()[i] != xs[0].shape()[i]) {
        throw ConfigError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                          shape_str(xs[0].shape()));
      }
    }
    out_shape[axis] += t.shape()[axis];
  }
  std::int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  std::int64_t tail = 1;
  for (int i = axis + 1; i < rank; ++i) tail *= out_shape[i];
  std::vector<std::int64_t> block(xs.size());
  std::int64_t out_block = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    block[k] = xs[k].shape()[axis] * tail;
    out_block += block[k];
  }
  auto out = detail::make_result(out_shape, xs);
  out->value.resize(static_cast<std::size_t>(outer * out_block));
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto src = xs[k].data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(src.data() + o * block[k], block[k], out->value.data() + o * out_block + offset);
    offset += block[k];
  }
  if (out->requires_grad) {
    Node* self = out.get();
    std::vector<Node*> inputs;
    for (const Tensor& t : xs) inputs.push_back(t.node());
    out->backward = [self, inputs, block, outer, out_block] {
      std::int64_t offset = 0;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (wants(inputs[k])) {
          auto& g = inputs[k]->grad_buffer();
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < block[k]; ++i)
              g[o * block[k] + i] += self->grad[o * out_block + offset + i];
        }
        offset += block[k];
      }
    };
  }
  return Tensor(out);
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  const int rank = x.ndim();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank || start < 0 || length < 0 || start + length > x.shape()[axis]) {
    throw ConfigError("slice: range out of bounds for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  std::int64_t tail = 1;
  for (int i = axis + 1; i < rank; ++i) tail *= out_shape[i];
  const std::int64_t in_block = static_cast<std::int64_t>(x.shape()[axis]) * tail;
  const std::int64_t out_block = static_cast<std::int64_t>(length) * tail;
  const std::int64_t offset = static_cast<std::int64_t>(start) * tail;
  auto out = detail::make_result(out_shape, {&x});
  out->value.resize(static_cast<std::size_t>(outer * out_block));
  auto xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(xv.data() + o * in_block + offset, out_block, out->value.data() + o * out_block);
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    out->backward = [self, nx, outer, in_block, out_block, offset] {
      auto& g = nx->grad_buffer();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < out_block; ++i) g[o * in_block + offset + i] += self->grad[o * out_block + i];
    };
  }
  return Tensor(out);
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: rate must be < 1");
  std::vector<double> mask(x.numel());
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng.bernoulli(p) ? 0.0 : keep;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor project_out_rows(const Tensor& v, const Tensor& u, double eps) {
  require_same_shape(v, u, "project_out_rows");
  require_rank(v, 2, "project_out_rows");
  const int rows = v.dim(0), d = v.dim(1);
  auto out = detail::make_result(v.shape(), {&v, &u});
  out->value.resize(v.numel());
  std::vector<double> coef(rows, 0.0), unorm2(rows, 0.0);
  auto vv = v.data(), uv = u.data();
  for (int r = 0; r < rows; ++r) {
    const double* vr = vv.data() + static_cast<std::size_t>(r) * d;
    const double* ur = uv.data() + static_cast<std::size_t>(r) * d;
    double* o = out->value.data() + static_cast<std::size_t>(r) * d;
    double vu = 0.0, uu = 0.0;
    for (int j = 0; j < d; ++j) {
      vu += vr[j] * ur[j];
      uu += ur[j] * ur[j];
    }
    unorm2[r] = uu;
    if (uu < eps) {
      std::copy_n(vr, d, o);
      continue;
    }
    const double c = vu / uu;
    coef[r] = c;
    for (int j = 0; j < d; ++j) o[j] = vr[j] - c * ur[j];
  }
  if (out->requires_grad) {
    Node *self = out.get(), *nv = v.node(), *nu = u.node();
    out->backward = [self, nv, nu, rows, d, eps, coef = std::move(coef), unorm2 = std::move(unorm2)] {
      for (int r = 0; r < rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * d;
        const double* g = self->grad.data() + base;
        const double* ur = nu->value.data() + base;
        const double* vr = nv->value.data() + base;
        if (unorm2[r] < eps) {
          if (wants(nv)) {
            auto& gv = nv->grad_buffer();
            for (int j = 0; j < d; ++j) gv[base + j] += g[j];
          }
          continue;
        }
        double gu = 0.0;
        for (int j = 0; j < d; ++j) gu += g[j] * ur[j];
        const double c = coef[r], uu = unorm2[r];
        if (wants(nv)) {
          auto& gv = nv->grad_buffer();
          for (int j = 0; j < d; ++j) gv[base + j] += g[j] - (gu / uu) * ur[j];
        }
        if (wants(nu)) {
          auto& gvu = nu->grad_buffer();
          for (int j = 0; j < d; ++j) gvu[base + j] += -c * g[j] - gu * (vr[j] - 2.0 * c * ur[j]) / uu;
        }
      }
    };
  }
  return Tensor(out);
}

Tensor cosine_rows(const Tensor& a, const Tensor& b, int* zero_rows) {
  require_same_shape(a, b, "cosine_rows");
  require_rank(a, 2, "cosine_rows");
  const int rows = a.dim(0), d = a.dim(1);
  auto out = detail::make_result({rows}, {&a, &b});
  out->value.assign(rows, 0.0);
  std::vector<double> na2(rows), nb2(rows);
  std::vector<char> degenerate(rows, 0);
  auto av = a.data(), bv = b.data();
  int zeros = 0;
  for (int r = 0; r < rows; ++r) {
    const double* ar = av.data() + static_cast<std::size_t>(r) * d;
    const double* br = bv.data() + static_cast<std::size_t>(r) * d;
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (int j = 0; j < d; ++j) {
      ab += ar[j] * br[j];
      aa += ar[j] * ar[j];
      bb += br[j] * br[j];
    }
    na2[r] = aa;
    nb2[r] = bb;
    if (aa == 0.0 || bb == 0.0) {
      degenerate[r] = 1;
      ++zeros;
      continue;
    }
    out->value[r] = ab / std::sqrt(aa * bb);
  }
  if (zero_rows) *zero_rows += zeros;
  if (out->requires_grad) {
    Node *self = out.get(), *na = a.node(), *nb = b.node();
    out->backward = [self, na, nb, rows, d, na2 = std::move(na2), nb2 = std::move(nb2),
                     degenerate = std::move(degenerate)] {
      for (int r = 0; r < rows; ++r) {
        if (degenerate[r]) continue;
        const std::size_t base = static_cast<std::size_t>(r) * d;
        const double g = self->grad[r];
        const double cos = self->value[r];
        const double inv = 1.0 / std::sqrt(na2[r] * nb2[r]);
        const double* ar = na->value.data() + base;
        const double* br = nb->value.data() + base;
        if (wants(na)) {
          auto& ga = na->grad_buffer();
          for (int j = 0; j < d; ++j) ga[base + j] += g * (br[j] * inv - cos * ar[j] / na2[r]);
        }
        if (wants(nb)) {
          auto& gb = nb->grad_buffer();
          for (int j = 0; j < d; ++j) gb[base + j] += g * (ar[j] * inv - cos * br[j] / nb2[r]);
        }
      }
    };
  }
  return Tensor(out);
}

Tensor normalize_rows(const Tensor& x) {
  require_rank(x, 2, "normalize_rows");
  const int rows = x.dim(0), d = x.dim(1);
  auto out = detail::make_result(x.shape(), {&x});
  out->value.assign(x.data().begin(), x.data().end());
  std::vector<double> norms(rows, 0.0);
  for (int r = 0; r < rows; ++r) {
    double* row = out->value.data() + static_cast<std::size_t>(r) * d;
    double nn = 0.0;
    for (int j = 0; j < d; ++j) nn += row[j] * row[j];
    norms[r] = std::sqrt(nn);
    if (norms[r] == 0.0) continue;
    for (int j = 0; j < d; ++j) row[j] /= norms[r];
  }
  if (out->requires_grad) {
    Node *self = out.get(), *nx = x.node();
    out->backward = [self, nx, rows, d, norms = std::move(norms)] {
      if (!wants(nx)) return;
      auto& gx = nx->grad_buffer();
      for (int r = 0; r < rows; ++r) {
        if (norms[r] == 0.0) continue;
        const std::size_t base = static_cast<std::size_t>(r) * d;
        const double* y = self->value.data() + base;
        const double* g = self->grad.data() + base;
        double yg = 0.0;
        for (int j = 0; j < d; ++j) yg += y[j] * g[j];
        for (int j = 0; j < d; ++j) gx[base + j] += (g[j] - y[j] * yg) / norms[r];
      }
    };
  }
  return Tensor(out);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "cross_entropy");
  const int batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<int>(labels.size()) != batch) throw ConfigError("cross_entropy: label count mismatch");
  for (int y : labels) {
    if (y < 0 || y >= classes) throw InputError("cross_entropy: label out of range");
  }
  auto out = detail::make_result({}, {&logits});
  std::vector<double> probs(logits.numel());
  auto lv = logits.data();
  double loss = 0.0;
  for (int r = 0; r < batch; ++r) {
    const double* in = lv.data() + static_cast<std::size_t>(r) * classes;
    double* p = probs.data() + static_cast<std::size_t>(r) * classes;
    double mx = in[0];
    for (int j = 1; j < classes; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (int j = 0; j < classes; ++j) z += std::exp(in[j] - mx);
    for (int j = 0; j < classes; ++j) p[j] = std::exp(in[j] - mx) / z;
    loss += -(in[labels[r]] - mx - std::log(z));
  }
  out->value = {loss / batch};
  if (out->requires_grad) {
    Node *self = out.get(), *nl = logits.node();
    out->backward = [self, nl, labels, batch, classes, probs = std::move(probs)] {
      auto& g = nl->grad_buffer();
      const double s = self->grad[0] / batch;
      for (int r = 0; r < batch; ++r)
        for (int j = 0; j < classes; ++j) {
          const std::size_t i = static_cast<std::size_t>(r) * classes + j;
          g[i] += s * (probs[i] - (j == labels[r] ? 1.0 : 0.0));
        }
    };
  }
  return Tensor(out);
}

}  // namespace spotdiff::ops

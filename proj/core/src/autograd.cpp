#include "frboost/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "frboost/errors.hpp"

namespace frboost::ag {

namespace {

std::atomic<uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;

NodePtr make_node(Tensor val) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return n;
}

// Adds src into dst, allocating a zero tensor of `shape` on first use.
void accum(Tensor& dst, const std::vector<int>& shape, const Tensor& src) {
  if (dst.empty()) dst = Tensor(shape);
  dst.add_(src);
}

void accum_at(Tensor& dst, const std::vector<int>& shape, size_t i, double v) {
  if (dst.empty()) dst = Tensor(shape);
  dst.d[i] += v;
}

void attach(const NodePtr& n, std::initializer_list<Var> parents, std::function<void(Node&)> fn) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      needs = needs || p.node->needs_grad;
    }
  }
  if (!needs) return;
  n->needs_grad = true;
  for (const auto& p : parents) n->parents.push_back(p.node);
  n->backward_fn = std::move(fn);
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Var Var::leaf(Tensor v, bool requires_grad) {
  auto n = make_node(std::move(v));
  n->needs_grad = requires_grad;
  return Var(n);
}

void Var::set_tangent(Tensor t) const {
  if (!t.empty() && t.numel() != node->val.numel()) {
    throw std::invalid_argument("tangent shape mismatch");
  }
  node->tan = std::move(t);
}

Var detach(const Var& x) { return Var::constant(x.value()); }

void backward(const Var& root, Tensor seed_grad, Tensor seed_gtan) {
  Node* r = root.node.get();
  if (!r->needs_grad) return;
  bool tan_seed = !seed_gtan.empty();
  if (!seed_grad.empty()) {
    accum(r->grad, r->val.shape, seed_grad);
  }
  if (tan_seed) {
    if (!r->has_tan()) throw std::logic_error("backward: tangent seed on node without tangent");
    accum(r->gtan, r->val.shape, seed_gtan);
  }
  if (seed_grad.empty() && !tan_seed) {
    if (r->val.numel() != 1) throw std::invalid_argument("backward: implicit seed needs scalar root");
    accum(r->grad, r->val.shape, Tensor::scalar(1.0));
  }

  // Topological order by creation sequence.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{r};
  seen.insert(r);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });
  for (Node* n : order) {
    if (!n->backward_fn) continue;
    if (n->grad.empty() && n->gtan.empty()) continue;
    n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise helpers
// ---------------------------------------------------------------------------

namespace {

// y = f(x) with derivative df and second derivative ddf (for the tangent
// channel's adjoint). Piecewise-linear fs pass ddf = nullptr.
template <typename F, typename DF, typename DDF>
Var unary_op(const Var& x, F f, DF df, DDF ddf, bool has_ddf) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (size_t i = 0; i < xv.d.size(); ++i) out.d[i] = f(xv.d[i]);
  auto n = make_node(std::move(out));
  if (x.node->has_tan()) {
    Tensor t(xv.shape);
    for (size_t i = 0; i < xv.d.size(); ++i) t.d[i] = df(xv.d[i]) * x.node->tan.d[i];
    n->tan = std::move(t);
  }
  attach(n, {x}, [px = x.node, df, ddf, has_ddf](Node& self) {
    const Tensor& xv = px->val;
    const bool xt = px->has_tan();
    if (!self.grad.empty()) {
      Tensor gx(xv.shape);
      for (size_t i = 0; i < xv.d.size(); ++i) gx.d[i] = self.grad.d[i] * df(xv.d[i]);
      accum(px->grad, xv.shape, gx);
    }
    if (!self.gtan.empty()) {
      if (xt && has_ddf) {
        Tensor gx(xv.shape);
        for (size_t i = 0; i < xv.d.size(); ++i)
          gx.d[i] = self.gtan.d[i] * ddf(xv.d[i]) * px->tan.d[i];
        accum(px->grad, xv.shape, gx);
      }
      if (xt) {
        Tensor gt(xv.shape);
        for (size_t i = 0; i < xv.d.size(); ++i) gt.d[i] = self.gtan.d[i] * df(xv.d[i]);
        accum(px->gtan, xv.shape, gt);
      }
    }
  });
  return Var(n);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.value().shape_str() +
                                " vs " + b.value().shape_str());
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a.value();
  out.add_(b.value());
  auto n = make_node(std::move(out));
  if (a.node->has_tan() || b.node->has_tan()) {
    Tensor t(a.value().shape);
    if (a.node->has_tan()) t.add_(a.node->tan);
    if (b.node->has_tan()) t.add_(b.node->tan);
    n->tan = std::move(t);
  }
  attach(n, {a, b}, [pa = a.node, pb = b.node](Node& self) {
    for (Node* p : {pa.get(), pb.get()}) {
      if (!p->needs_grad) continue;
      if (!self.grad.empty()) accum(p->grad, p->val.shape, self.grad);
      if (!self.gtan.empty() && p->has_tan()) accum(p->gtan, p->val.shape, self.gtan);
    }
  });
  return Var(n);
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a.value();
  out.add_(b.value(), -1.0);
  auto n = make_node(std::move(out));
  if (a.node->has_tan() || b.node->has_tan()) {
    Tensor t(a.value().shape);
    if (a.node->has_tan()) t.add_(a.node->tan);
    if (b.node->has_tan()) t.add_(b.node->tan, -1.0);
    n->tan = std::move(t);
  }
  attach(n, {a, b}, [pa = a.node, pb = b.node](Node& self) {
    if (pa->needs_grad) {
      if (!self.grad.empty()) accum(pa->grad, pa->val.shape, self.grad);
      if (!self.gtan.empty() && pa->has_tan()) accum(pa->gtan, pa->val.shape, self.gtan);
    }
    if (pb->needs_grad) {
      if (!self.grad.empty()) {
        Tensor g = self.grad;
        g.scale_(-1.0);
        accum(pb->grad, pb->val.shape, g);
      }
      if (!self.gtan.empty() && pb->has_tan()) {
        Tensor g = self.gtan;
        g.scale_(-1.0);
        accum(pb->gtan, pb->val.shape, g);
      }
    }
  });
  return Var(n);
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape);
  for (size_t i = 0; i < out.d.size(); ++i) out.d[i] = av.d[i] * bv.d[i];
  auto n = make_node(std::move(out));
  if (a.node->has_tan() || b.node->has_tan()) {
    Tensor t(av.shape);
    for (size_t i = 0; i < t.d.size(); ++i) {
      double ta = a.node->has_tan() ? a.node->tan.d[i] : 0.0;
      double tb = b.node->has_tan() ? b.node->tan.d[i] : 0.0;
      t.d[i] = ta * bv.d[i] + av.d[i] * tb;
    }
    n->tan = std::move(t);
  }
  attach(n, {a, b}, [pa = a.node, pb = b.node](Node& self) {
    const Tensor& av = pa->val;
    const Tensor& bv = pb->val;
    const bool at = pa->has_tan(), bt = pb->has_tan();
    auto side = [&](Node* x, const Tensor& other_val, const Tensor* other_tan, bool x_has_tan) {
      if (!x->needs_grad) return;
      if (!self.grad.empty() || (!self.gtan.empty() && other_tan)) {
        Tensor g(x->val.shape);
        for (size_t i = 0; i < g.d.size(); ++i) {
          double v = 0.0;
          if (!self.grad.empty()) v += self.grad.d[i] * other_val.d[i];
          if (!self.gtan.empty() && other_tan) v += self.gtan.d[i] * other_tan->d[i];
          g.d[i] = v;
        }
        accum(x->grad, x->val.shape, g);
      }
      if (!self.gtan.empty() && x_has_tan) {
        Tensor g(x->val.shape);
        for (size_t i = 0; i < g.d.size(); ++i) g.d[i] = self.gtan.d[i] * other_val.d[i];
        accum(x->gtan, x->val.shape, g);
      }
    };
    side(pa.get(), bv, bt ? &pb->tan : nullptr, at);
    side(pb.get(), av, at ? &pa->tan : nullptr, bt);
  });
  return Var(n);
}

Var neg(const Var& x) { return mul_scalar(x, -1.0); }

Var add_scalar(const Var& x, double c) {
  return unary_op(x, [c](double v) { return v + c; }, [](double) { return 1.0; },
                  [](double) { return 0.0; }, false);
}

Var mul_scalar(const Var& x, double c) {
  return unary_op(x, [c](double v) { return v * c; }, [c](double) { return c; },
                  [](double) { return 0.0; }, false);
}

Var relu(const Var& x) {
  return unary_op(x, [](double v) { return v > 0 ? v : 0.0; },
                  [](double v) { return v > 0 ? 1.0 : 0.0; }, [](double) { return 0.0; }, false);
}

Var leaky_relu(const Var& x, double slope) {
  return unary_op(x, [slope](double v) { return v > 0 ? v : slope * v; },
                  [slope](double v) { return v > 0 ? 1.0 : slope; }, [](double) { return 0.0; },
                  false);
}

Var sigmoid(const Var& x) {
  auto sg = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  return unary_op(x, sg, [sg](double v) { double s = sg(v); return s * (1.0 - s); },
                  [sg](double v) {
                    double s = sg(v);
                    return s * (1.0 - s) * (1.0 - 2.0 * s);
                  },
                  true);
}

Var softplus(const Var& x) {
  auto sg = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  return unary_op(x,
                  [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); },
                  sg, [sg](double v) { double s = sg(v); return s * (1.0 - s); }, true);
}

Var vexp(const Var& x) {
  auto e = [](double v) { return std::exp(v); };
  return unary_op(x, e, e, e, true);
}

Var vlog(const Var& x) {
  return unary_op(x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; },
                  [](double v) { return -1.0 / (v * v); }, true);
}

Var vsqrt(const Var& x) {
  return unary_op(x, [](double v) { return std::sqrt(v); },
                  [](double v) { return v > 0 ? 0.5 / std::sqrt(v) : 0.0; },
                  [](double v) { return v > 0 ? -0.25 / (v * std::sqrt(v)) : 0.0; }, true);
}

Var rsqrt(const Var& x, double eps) {
  return unary_op(x, [eps](double v) { return 1.0 / std::sqrt(v + eps); },
                  [eps](double v) { double u = v + eps; return -0.5 / (u * std::sqrt(u)); },
                  [eps](double v) { double u = v + eps; return 0.75 / (u * u * std::sqrt(u)); },
                  true);
}

Var square(const Var& x) {
  return unary_op(x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; },
                  [](double) { return 2.0; }, true);
}

Var vcos(const Var& x) {
  return unary_op(x, [](double v) { return std::cos(v); }, [](double v) { return -std::sin(v); },
                  [](double v) { return -std::cos(v); }, true);
}

Var vsin(const Var& x) {
  return unary_op(x, [](double v) { return std::sin(v); }, [](double v) { return std::cos(v); },
                  [](double v) { return -std::sin(v); }, true);
}

Var vacos(const Var& x) {
  auto cl = [](double v) {
    constexpr double lim = 1.0 - 1e-12;
    return std::clamp(v, -lim, lim);
  };
  return unary_op(x, [cl](double v) { return std::acos(cl(v)); },
                  [cl](double v) { double c = cl(v); return -1.0 / std::sqrt(1.0 - c * c); },
                  [cl](double v) {
                    double c = cl(v);
                    double s = 1.0 - c * c;
                    return -c / (s * std::sqrt(s));
                  },
                  true);
}

Var clamp_min(const Var& x, double lo) {
  return unary_op(x, [lo](double v) { return v < lo ? lo : v; },
                  [lo](double v) { return v > lo ? 1.0 : 0.0; }, [](double) { return 0.0; }, false);
}

Var clamp_max(const Var& x, double hi) {
  return unary_op(x, [hi](double v) { return v > hi ? hi : v; },
                  [hi](double v) { return v < hi ? 1.0 : 0.0; }, [](double) { return 0.0; }, false);
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

struct MmDims {
  int m, n, k;
};

MmDims mm_dims(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.ndim() != 2 || b.ndim() != 2) throw std::invalid_argument("matmul: need 2-d operands");
  int m = ta ? a.dim(1) : a.dim(0);
  int ka = ta ? a.dim(0) : a.dim(1);
  int kb = tb ? b.dim(1) : b.dim(0);
  int n = tb ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + a.shape_str() + " x " +
                                b.shape_str());
  }
  return {m, n, ka};
}

Tensor mm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  MmDims d = mm_dims(a, b, ta, tb);
  Tensor out({d.m, d.n});
  gemm(ta, tb, d.m, d.n, d.k, 1.0, a.data(), b.data(), 0.0, out.data());
  return out;
}

// dA for C = op(A)op(B) given adjoint G of C and the B-side value.
void mm_accum_dA(Tensor& dst, const std::vector<int>& a_shape, bool ta, bool tb, const Tensor& g,
                 const Tensor& b) {
  Tensor contrib = ta ? (tb ? mm(b, g, true, true) : mm(b, g, false, true))
                      : (tb ? mm(g, b, false, false) : mm(g, b, false, true));
  accum(dst, a_shape, contrib);
}

void mm_accum_dB(Tensor& dst, const std::vector<int>& b_shape, bool ta, bool tb, const Tensor& g,
                 const Tensor& a) {
  Tensor contrib = tb ? (ta ? mm(g, a, true, true) : mm(g, a, true, false))
                      : (ta ? mm(a, g, false, false) : mm(a, g, true, false));
  accum(dst, b_shape, contrib);
}

}  // namespace

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = mm(av, bv, ta, tb);
  auto n = make_node(std::move(out));
  if (a.node->has_tan() || b.node->has_tan()) {
    MmDims d = mm_dims(av, bv, ta, tb);
    Tensor t({d.m, d.n});
    if (a.node->has_tan()) t.add_(mm(a.node->tan, bv, ta, tb));
    if (b.node->has_tan()) t.add_(mm(av, b.node->tan, ta, tb));
    n->tan = std::move(t);
  }
  attach(n, {a, b}, [pa = a.node, pb = b.node, ta, tb](Node& self) {
    const Tensor& av = pa->val;
    const Tensor& bv = pb->val;
    if (pa->needs_grad) {
      if (!self.grad.empty()) mm_accum_dA(pa->grad, av.shape, ta, tb, self.grad, bv);
      if (!self.gtan.empty()) {
        if (pb->has_tan()) mm_accum_dA(pa->grad, av.shape, ta, tb, self.gtan, pb->tan);
        if (pa->has_tan()) mm_accum_dA(pa->gtan, av.shape, ta, tb, self.gtan, bv);
      }
    }
    if (pb->needs_grad) {
      if (!self.grad.empty()) mm_accum_dB(pb->grad, bv.shape, ta, tb, self.grad, av);
      if (!self.gtan.empty()) {
        if (pa->has_tan()) mm_accum_dB(pb->grad, bv.shape, ta, tb, self.gtan, pa->tan);
        if (pb->has_tan()) mm_accum_dB(pb->gtan, bv.shape, ta, tb, self.gtan, av);
      }
    }
  });
  return Var(n);
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int B, C, H, W, O, KH, KW, OH, OW, stride, pad;
  int ckk() const { return C * KH * KW; }
  int ohw() const { return OH * OW; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4) throw std::invalid_argument("conv2d: need 4-d operands");
  if (x.dim(1) != w.dim(1)) {
    throw std::invalid_argument("conv2d: channel mismatch " + x.shape_str() + " vs " +
                                w.shape_str());
  }
  ConvDims d;
  d.B = x.dim(0);
  d.C = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.O = w.dim(0);
  d.KH = w.dim(2);
  d.KW = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
  d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
  if (d.OH <= 0 || d.OW <= 0) throw std::invalid_argument("conv2d: empty output");
  return d;
}

void im2col(const double* x, const ConvDims& d, double* col) {
  for (int c = 0; c < d.C; ++c) {
    for (int ky = 0; ky < d.KH; ++ky) {
      for (int kx = 0; kx < d.KW; ++kx) {
        double* row = col + (static_cast<int64_t>((c * d.KH + ky) * d.KW + kx)) * d.ohw();
        for (int oy = 0; oy < d.OH; ++oy) {
          int iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.H) {
            for (int ox = 0; ox < d.OW; ++ox) row[oy * d.OW + ox] = 0.0;
            continue;
          }
          const double* xr = x + (static_cast<int64_t>(c) * d.H + iy) * d.W;
          for (int ox = 0; ox < d.OW; ++ox) {
            int ix = ox * d.stride - d.pad + kx;
            row[oy * d.OW + ox] = (ix >= 0 && ix < d.W) ? xr[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* x) {
  for (int c = 0; c < d.C; ++c) {
    for (int ky = 0; ky < d.KH; ++ky) {
      for (int kx = 0; kx < d.KW; ++kx) {
        const double* row = col + (static_cast<int64_t>((c * d.KH + ky) * d.KW + kx)) * d.ohw();
        for (int oy = 0; oy < d.OH; ++oy) {
          int iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.H) continue;
          double* xr = x + (static_cast<int64_t>(c) * d.H + iy) * d.W;
          for (int ox = 0; ox < d.OW; ++ox) {
            int ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.W) xr[ix] += row[oy * d.OW + ox];
          }
        }
      }
    }
  }
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const ConvDims& d) {
  Tensor out({d.B, d.O, d.OH, d.OW});
  Tensor col({d.ckk(), d.ohw()});
  const int64_t xs = static_cast<int64_t>(d.C) * d.H * d.W;
  const int64_t ys = static_cast<int64_t>(d.O) * d.ohw();
  for (int b = 0; b < d.B; ++b) {
    im2col(x.data() + b * xs, d, col.data());
    gemm(false, false, d.O, d.ohw(), d.ckk(), 1.0, w.data(), col.data(), 0.0, out.data() + b * ys);
  }
  return out;
}

void conv_dinput_add(Tensor& gx, const Tensor& gy, const Tensor& w, const ConvDims& d) {
  if (gx.empty()) gx = Tensor({d.B, d.C, d.H, d.W});
  Tensor colg({d.ckk(), d.ohw()});
  const int64_t xs = static_cast<int64_t>(d.C) * d.H * d.W;
  const int64_t ys = static_cast<int64_t>(d.O) * d.ohw();
  for (int b = 0; b < d.B; ++b) {
    gemm(true, false, d.ckk(), d.ohw(), d.O, 1.0, w.data(), gy.data() + b * ys, 0.0, colg.data());
    col2im_add(colg.data(), d, gx.data() + b * xs);
  }
}

void conv_dweight_add(Tensor& gw, const Tensor& x, const Tensor& gy, const ConvDims& d) {
  if (gw.empty()) gw = Tensor({d.O, d.C, d.KH, d.KW});
  Tensor col({d.ckk(), d.ohw()});
  const int64_t xs = static_cast<int64_t>(d.C) * d.H * d.W;
  const int64_t ys = static_cast<int64_t>(d.O) * d.ohw();
  for (int b = 0; b < d.B; ++b) {
    im2col(x.data() + b * xs, d, col.data());
    gemm(false, true, d.O, d.ckk(), d.ohw(), 1.0, gy.data() + b * ys, col.data(), 1.0, gw.data());
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  ConvDims d = conv_dims(xv, wv, stride, pad);
  auto n = make_node(conv_forward(xv, wv, d));
  if (x.node->has_tan() || w.node->has_tan()) {
    Tensor t({d.B, d.O, d.OH, d.OW});
    if (x.node->has_tan()) t.add_(conv_forward(x.node->tan, wv, d));
    if (w.node->has_tan()) t.add_(conv_forward(xv, w.node->tan, d));
    n->tan = std::move(t);
  }
  attach(n, {x, w}, [px = x.node, pw = w.node, d](Node& self) {
    const Tensor& xv = px->val;
    const Tensor& wv = pw->val;
    if (px->needs_grad) {
      if (!self.grad.empty()) conv_dinput_add(px->grad, self.grad, wv, d);
      if (!self.gtan.empty()) {
        if (pw->has_tan()) conv_dinput_add(px->grad, self.gtan, pw->tan, d);
        if (px->has_tan()) conv_dinput_add(px->gtan, self.gtan, wv, d);
      }
    }
    if (pw->needs_grad) {
      if (!self.grad.empty()) conv_dweight_add(pw->grad, xv, self.grad, d);
      if (!self.gtan.empty()) {
        if (px->has_tan()) conv_dweight_add(pw->grad, px->tan, self.gtan, d);
        if (pw->has_tan()) conv_dweight_add(pw->gtan, xv, self.gtan, d);
      }
    }
  });
  return Var(n);
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

namespace {

Tensor pool2_fwd(const Tensor& x) {
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({B, C, H / 2, W / 2});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H / 2; ++y)
        for (int xx = 0; xx < W / 2; ++xx)
          out.at4(b, c, y, xx) = 0.25 * (x.at4(b, c, 2 * y, 2 * xx) + x.at4(b, c, 2 * y, 2 * xx + 1) +
                                         x.at4(b, c, 2 * y + 1, 2 * xx) +
                                         x.at4(b, c, 2 * y + 1, 2 * xx + 1));
  return out;
}

void pool2_bwd_add(Tensor& gx, const std::vector<int>& xshape, const Tensor& g) {
  if (gx.empty()) gx = Tensor(xshape);
  int B = g.dim(0), C = g.dim(1), OH = g.dim(2), OW = g.dim(3);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < OH; ++y)
        for (int xx = 0; xx < OW; ++xx) {
          double v = 0.25 * g.at4(b, c, y, xx);
          gx.at4(b, c, 2 * y, 2 * xx) += v;
          gx.at4(b, c, 2 * y, 2 * xx + 1) += v;
          gx.at4(b, c, 2 * y + 1, 2 * xx) += v;
          gx.at4(b, c, 2 * y + 1, 2 * xx + 1) += v;
        }
}

Tensor up2_fwd(const Tensor& x) {
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({B, C, 2 * H, 2 * W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          double v = x.at4(b, c, y, xx);
          out.at4(b, c, 2 * y, 2 * xx) = v;
          out.at4(b, c, 2 * y, 2 * xx + 1) = v;
          out.at4(b, c, 2 * y + 1, 2 * xx) = v;
          out.at4(b, c, 2 * y + 1, 2 * xx + 1) = v;
        }
  return out;
}

void up2_bwd_add(Tensor& gx, const std::vector<int>& xshape, const Tensor& g) {
  if (gx.empty()) gx = Tensor(xshape);
  int B = gx.dim(0), C = gx.dim(1), H = gx.dim(2), W = gx.dim(3);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          gx.at4(b, c, y, xx) += g.at4(b, c, 2 * y, 2 * xx) + g.at4(b, c, 2 * y, 2 * xx + 1) +
                                 g.at4(b, c, 2 * y + 1, 2 * xx) + g.at4(b, c, 2 * y + 1, 2 * xx + 1);
}

}  // namespace

Var avgpool2(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4 || xv.dim(2) % 2 || xv.dim(3) % 2)
    throw std::invalid_argument("avgpool2: need even 4-d input");
  auto n = make_node(pool2_fwd(xv));
  if (x.node->has_tan()) n->tan = pool2_fwd(x.node->tan);
  attach(n, {x}, [px = x.node](Node& self) {
    if (!self.grad.empty()) pool2_bwd_add(px->grad, px->val.shape, self.grad);
    if (!self.gtan.empty() && px->has_tan()) pool2_bwd_add(px->gtan, px->val.shape, self.gtan);
  });
  return Var(n);
}

Var upsample_nearest2(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw std::invalid_argument("upsample_nearest2: need 4-d input");
  auto n = make_node(up2_fwd(xv));
  if (x.node->has_tan()) n->tan = up2_fwd(x.node->tan);
  attach(n, {x}, [px = x.node](Node& self) {
    if (!self.grad.empty()) up2_bwd_add(px->grad, px->val.shape, self.grad);
    if (!self.gtan.empty() && px->has_tan()) up2_bwd_add(px->gtan, px->val.shape, self.gtan);
  });
  return Var(n);
}

namespace {

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

LerpAxis make_lerp(int in, int out) {
  LerpAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w1.resize(out);
  double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    double f = std::floor(src);
    double w = src - f;
    int i0 = static_cast<int>(f);
    int i1 = i0 + 1;
    if (i0 < 0) { i0 = 0; i1 = 0; w = 0.0; }
    if (i1 >= in) { i1 = in - 1; if (i0 >= in) i0 = in - 1; }
    if (i0 >= in) i0 = in - 1;
    a.i0[o] = i0;
    a.i1[o] = i1;
    a.w1[o] = w;
  }
  return a;
}

Tensor lerp_fwd(const Tensor& x, const LerpAxis& ay, const LerpAxis& ax, int oh, int ow) {
  int B = x.dim(0), C = x.dim(1);
  Tensor out({B, C, oh, ow});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double vy0 = (1 - ax.w1[xx]) * x.at4(b, c, ay.i0[y], ax.i0[xx]) +
                       ax.w1[xx] * x.at4(b, c, ay.i0[y], ax.i1[xx]);
          double vy1 = (1 - ax.w1[xx]) * x.at4(b, c, ay.i1[y], ax.i0[xx]) +
                       ax.w1[xx] * x.at4(b, c, ay.i1[y], ax.i1[xx]);
          out.at4(b, c, y, xx) = (1 - ay.w1[y]) * vy0 + ay.w1[y] * vy1;
        }
  return out;
}

void lerp_bwd_add(Tensor& gx, const std::vector<int>& xshape, const Tensor& g, const LerpAxis& ay,
                  const LerpAxis& ax) {
  if (gx.empty()) gx = Tensor(xshape);
  int B = g.dim(0), C = g.dim(1), OH = g.dim(2), OW = g.dim(3);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < OH; ++y)
        for (int xx = 0; xx < OW; ++xx) {
          double gv = g.at4(b, c, y, xx);
          gx.at4(b, c, ay.i0[y], ax.i0[xx]) += (1 - ay.w1[y]) * (1 - ax.w1[xx]) * gv;
          gx.at4(b, c, ay.i0[y], ax.i1[xx]) += (1 - ay.w1[y]) * ax.w1[xx] * gv;
          gx.at4(b, c, ay.i1[y], ax.i0[xx]) += ay.w1[y] * (1 - ax.w1[xx]) * gv;
          gx.at4(b, c, ay.i1[y], ax.i1[xx]) += ay.w1[y] * ax.w1[xx] * gv;
        }
}

}  // namespace

Var bilinear_resize(const Var& x, int oh, int ow) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw std::invalid_argument("bilinear_resize: need 4-d input");
  auto ay = std::make_shared<LerpAxis>(make_lerp(xv.dim(2), oh));
  auto ax = std::make_shared<LerpAxis>(make_lerp(xv.dim(3), ow));
  auto n = make_node(lerp_fwd(xv, *ay, *ax, oh, ow));
  if (x.node->has_tan()) n->tan = lerp_fwd(x.node->tan, *ay, *ax, oh, ow);
  attach(n, {x}, [px = x.node, ay, ax](Node& self) {
    if (!self.grad.empty()) lerp_bwd_add(px->grad, px->val.shape, self.grad, *ay, *ax);
    if (!self.gtan.empty() && px->has_tan())
      lerp_bwd_add(px->gtan, px->val.shape, self.gtan, *ay, *ax);
  });
  return Var(n);
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

namespace {

// Validates that s.shape is a prefix of x.shape; returns {P, Q}.
std::pair<int64_t, int64_t> prefix_split(const Tensor& x, const Tensor& s) {
  if (s.ndim() > x.ndim()) throw std::invalid_argument("bcast: too many dims");
  int64_t p = 1;
  for (int i = 0; i < s.ndim(); ++i) {
    if (s.dim(i) != x.dim(i)) {
      throw std::invalid_argument("bcast: " + s.shape_str() + " is not a prefix of " +
                                  x.shape_str());
    }
    p *= s.dim(i);
  }
  return {p, x.numel() / std::max<int64_t>(p, 1)};
}

}  // namespace

Var bcast_mul(const Var& x, const Var& s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  auto [P, Q] = prefix_split(xv, sv);
  Tensor out(xv.shape);
  for (int64_t p = 0; p < P; ++p)
    for (int64_t q = 0; q < Q; ++q) out.d[static_cast<size_t>(p * Q + q)] = xv.d[static_cast<size_t>(p * Q + q)] * sv.d[static_cast<size_t>(p)];
  auto n = make_node(std::move(out));
  if (x.node->has_tan() || s.node->has_tan()) {
    Tensor t(xv.shape);
    for (int64_t p = 0; p < P; ++p)
      for (int64_t q = 0; q < Q; ++q) {
        size_t i = static_cast<size_t>(p * Q + q);
        double tx = x.node->has_tan() ? x.node->tan.d[i] : 0.0;
        double ts = s.node->has_tan() ? s.node->tan.d[static_cast<size_t>(p)] : 0.0;
        t.d[i] = tx * sv.d[static_cast<size_t>(p)] + xv.d[i] * ts;
      }
    n->tan = std::move(t);
  }
  attach(n, {x, s}, [px = x.node, ps = s.node, P = P, Q = Q](Node& self) {
    const Tensor& xv = px->val;
    const Tensor& sv = ps->val;
    if (px->needs_grad) {
      if (!self.grad.empty() || (!self.gtan.empty() && ps->has_tan())) {
        Tensor g(xv.shape);
        for (int64_t p = 0; p < P; ++p)
          for (int64_t q = 0; q < Q; ++q) {
            size_t i = static_cast<size_t>(p * Q + q);
            double v = 0.0;
            if (!self.grad.empty()) v += self.grad.d[i] * sv.d[static_cast<size_t>(p)];
            if (!self.gtan.empty() && ps->has_tan())
              v += self.gtan.d[i] * ps->tan.d[static_cast<size_t>(p)];
            g.d[i] = v;
          }
        accum(px->grad, xv.shape, g);
      }
      if (!self.gtan.empty() && px->has_tan()) {
        Tensor g(xv.shape);
        for (int64_t p = 0; p < P; ++p)
          for (int64_t q = 0; q < Q; ++q) {
            size_t i = static_cast<size_t>(p * Q + q);
            g.d[i] = self.gtan.d[i] * sv.d[static_cast<size_t>(p)];
          }
        accum(px->gtan, xv.shape, g);
      }
    }
    if (ps->needs_grad) {
      if (!self.grad.empty() || (!self.gtan.empty() && px->has_tan())) {
        Tensor g(sv.shape);
        for (int64_t p = 0; p < P; ++p) {
          double acc = 0.0;
          for (int64_t q = 0; q < Q; ++q) {
            size_t i = static_cast<size_t>(p * Q + q);
            if (!self.grad.empty()) acc += self.grad.d[i] * xv.d[i];
            if (!self.gtan.empty() && px->has_tan()) acc += self.gtan.d[i] * px->tan.d[i];
          }
          g.d[static_cast<size_t>(p)] = acc;
        }
        accum(ps->grad, sv.shape, g);
      }
      if (!self.gtan.empty() && ps->has_tan()) {
        Tensor g(sv.shape);
        for (int64_t p = 0; p < P; ++p) {
          double acc = 0.0;
          for (int64_t q = 0; q < Q; ++q) acc += self.gtan.d[static_cast<size_t>(p * Q + q)] * xv.d[static_cast<size_t>(p * Q + q)];
          g.d[static_cast<size_t>(p)] = acc;
        }
        accum(ps->gtan, sv.shape, g);
      }
    }
  });
  return Var(n);
}

Var bcast_add(const Var& x, const Var& s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  auto [P, Q] = prefix_split(xv, sv);
  Tensor out(xv.shape);
  for (int64_t p = 0; p < P; ++p)
    for (int64_t q = 0; q < Q; ++q)
      out.d[static_cast<size_t>(p * Q + q)] = xv.d[static_cast<size_t>(p * Q + q)] + sv.d[static_cast<size_t>(p)];
  auto n = make_node(std::move(out));
  if (x.node->has_tan() || s.node->has_tan()) {
    Tensor t(xv.shape);
    for (int64_t p = 0; p < P; ++p)
      for (int64_t q = 0; q < Q; ++q) {
        size_t i = static_cast<size_t>(p * Q + q);
        double tx = x.node->has_tan() ? x.node->tan.d[i] : 0.0;
        double ts = s.node->has_tan() ? s.node->tan.d[static_cast<size_t>(p)] : 0.0;
        t.d[i] = tx + ts;
      }
    n->tan = std::move(t);
  }
  attach(n, {x, s}, [px = x.node, ps = s.node, P = P, Q = Q](Node& self) {
    if (px->needs_grad) {
      if (!self.grad.empty()) accum(px->grad, px->val.shape, self.grad);
      if (!self.gtan.empty()) accum(px->gtan, px->val.shape, self.gtan);
    }
    if (ps->needs_grad) {
      auto rowsum = [&](const Tensor& g) {
        Tensor r(ps->val.shape);
        for (int64_t p = 0; p < P; ++p) {
          double acc = 0.0;
          for (int64_t q = 0; q < Q; ++q) acc += g.d[static_cast<size_t>(p * Q + q)];
          r.d[static_cast<size_t>(p)] = acc;
        }
        return r;
      };
      if (!self.grad.empty()) accum(ps->grad, ps->val.shape, rowsum(self.grad));
      if (!self.gtan.empty()) accum(ps->gtan, ps->val.shape, rowsum(self.gtan));
    }
  });
  return Var(n);
}

namespace {

// Shared machinery for channel_add / channel_mul / suffix_add / cbcast ops:
// the broadcast pattern is captured by an index-mapping function from x's
// linear index to the small tensor's linear index.
struct BcastPlan {
  int64_t n = 0;
  std::function<int64_t(int64_t)> map;
};

BcastPlan channel_plan(const Tensor& x, const Tensor& c) {
  if (c.ndim() != 1 || x.ndim() < 2 || x.dim(1) != c.dim(0))
    throw std::invalid_argument("channel op: want x [B,C,...] and arg [C], got " + x.shape_str() +
                                " and " + c.shape_str());
  int64_t rest = 1;
  for (int i = 2; i < x.ndim(); ++i) rest *= x.dim(i);
  int C = x.dim(1);
  BcastPlan pl;
  pl.n = x.numel();
  pl.map = [C, rest](int64_t i) { return (i / rest) % C; };
  return pl;
}

BcastPlan suffix_plan(const Tensor& x, const Tensor& s) {
  if (s.ndim() > x.ndim()) throw std::invalid_argument("suffix op: too many dims");
  int off = x.ndim() - s.ndim();
  int64_t q = 1;
  for (int i = 0; i < s.ndim(); ++i) {
    if (x.dim(off + i) != s.dim(i))
      throw std::invalid_argument("suffix op: " + s.shape_str() + " is not a suffix of " +
                                  x.shape_str());
    q *= s.dim(i);
  }
  BcastPlan pl;
  pl.n = x.numel();
  pl.map = [q](int64_t i) { return i % q; };
  return pl;
}

BcastPlan cbcast_plan(const Tensor& x, const Tensor& m) {
  if (x.ndim() != 4 || m.ndim() != 4 || m.dim(1) != 1 || m.dim(0) != x.dim(0) ||
      m.dim(2) != x.dim(2) || m.dim(3) != x.dim(3))
    throw std::invalid_argument("cbcast op: want x [B,C,H,W] and arg [B,1,H,W]");
  int64_t chw = static_cast<int64_t>(x.dim(1)) * x.dim(2) * x.dim(3);
  int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  BcastPlan pl;
  pl.n = x.numel();
  pl.map = [chw, hw](int64_t i) { return (i / chw) * hw + (i % hw); };
  return pl;
}

Var bcast_add_generic(const Var& x, const Var& b, BcastPlan pl) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  Tensor out = xv;
  for (int64_t i = 0; i < pl.n; ++i) out.d[static_cast<size_t>(i)] += bv.d[static_cast<size_t>(pl.map(i))];
  auto n = make_node(std::move(out));
  if (x.node->has_tan() || b.node->has_tan()) {
    Tensor t(xv.shape);
    for (int64_t i = 0; i < pl.n; ++i) {
      double v = x.node->has_tan() ? x.node->tan.d[static_cast<size_t>(i)] : 0.0;
      if (b.node->has_tan()) v += b.node->tan.d[static_cast<size_t>(pl.map(i))];
      t.d[static_cast<size_t>(i)] = v;
    }
    n->tan = std::move(t);
  }
  attach(n, {x, b}, [px = x.node, pb = b.node, pl](Node& self) {
    if (px->needs_grad) {
      if (!self.grad.empty()) accum(px->grad, px->val.shape, self.grad);
      if (!self.gtan.empty() && px->has_tan()) accum(px->gtan, px->val.shape, self.gtan);
    }
    if (pb->needs_grad) {
      if (!self.grad.empty()) {
        Tensor g(pb->val.shape);
        for (int64_t i = 0; i < pl.n; ++i) g.d[static_cast<size_t>(pl.map(i))] += self.grad.d[static_cast<size_t>(i)];
        accum(pb->grad, pb->val.shape, g);
      }
      if (!self.gtan.empty() && pb->has_tan()) {
        Tensor g(pb->val.shape);
        for (int64_t i = 0; i < pl.n; ++i) g.d[static_cast<size_t>(pl.map(i))] += self.gtan.d[static_cast<size_t>(i)];
        accum(pb->gtan, pb->val.shape, g);
      }
    }
  });
  return Var(n);
}

Var bcast_mul_generic(const Var& x, const Var& m, BcastPlan pl) {
  const Tensor& xv = x.value();
  const Tensor& mv = m.value();
  Tensor out(xv.shape);
  for (int64_t i = 0; i < pl.n; ++i) out.d[static_cast<size_t>(i)] = xv.d[static_cast<size_t>(i)] * mv.d[static_cast<size_t>(pl.map(i))];
  auto n = make_node(std::move(out));
  if (x.node->has_tan() || m.node->has_tan()) {
    Tensor t(xv.shape);
    for (int64_t i = 0; i < pl.n; ++i) {
      size_t ii = static_cast<size_t>(i), mi = static_cast<size_t>(pl.map(i));
      double tx = x.node->has_tan() ? x.node->tan.d[ii] : 0.0;
      double tm = m.node->has_tan() ? m.node->tan.d[mi] : 0.0;
      t.d[ii] = tx * mv.d[mi] + xv.d[ii] * tm;
    }
    n->tan = std::move(t);
  }
  attach(n, {x, m}, [px = x.node, pm = m.node, pl](Node& self) {
    const Tensor& xv = px->val;
    const Tensor& mv = pm->val;
    if (px->needs_grad) {
      if (!self.grad.empty() || (!self.gtan.empty() && pm->has_tan())) {
        Tensor g(xv.shape);
        for (int64_t i = 0; i < pl.n; ++i) {
          size_t ii = static_cast<size_t>(i), mi = static_cast<size_t>(pl.map(i));
          double v = 0.0;
          if (!self.grad.empty()) v += self.grad.d[ii] * mv.d[mi];
          if (!self.gtan.empty() && pm->has_tan()) v += self.gtan.d[ii] * pm->tan.d[mi];
          g.d[ii] = v;
        }
        accum(px->grad, xv.shape, g);
      }
      if (!self.gtan.empty() && px->has_tan()) {
        Tensor g(xv.shape);
        for (int64_t i = 0; i < pl.n; ++i) {
          size_t ii = static_cast<size_t>(i);
          g.d[ii] = self.gtan.d[ii] * mv.d[static_cast<size_t>(pl.map(i))];
        }
        accum(px->gtan, xv.shape, g);
      }
    }
    if (pm->needs_grad) {
      if (!self.grad.empty() || (!self.gtan.empty() && px->has_tan())) {
        Tensor g(mv.shape);
        for (int64_t i = 0; i < pl.n; ++i) {
          size_t ii = static_cast<size_t>(i), mi = static_cast<size_t>(pl.map(i));
          if (!self.grad.empty()) g.d[mi] += self.grad.d[ii] * xv.d[ii];
          if (!self.gtan.empty() && px->has_tan()) g.d[mi] += self.gtan.d[ii] * px->tan.d[ii];
        }
        accum(pm->grad, mv.shape, g);
      }
      if (!self.gtan.empty() && pm->has_tan()) {
        Tensor g(mv.shape);
        for (int64_t i = 0; i < pl.n; ++i)
          g.d[static_cast<size_t>(pl.map(i))] += self.gtan.d[static_cast<size_t>(i)] * xv.d[static_cast<size_t>(i)];
        accum(pm->gtan, mv.shape, g);
      }
    }
  });
  return Var(n);
}

}  // namespace

Var channel_add(const Var& x, const Var& b) { return bcast_add_generic(x, b, channel_plan(x.value(), b.value())); }
Var channel_mul(const Var& x, const Var& m) { return bcast_mul_generic(x, m, channel_plan(x.value(), m.value())); }
Var suffix_add(const Var& x, const Var& b) { return bcast_add_generic(x, b, suffix_plan(x.value(), b.value())); }
Var cbcast_add(const Var& x, const Var& m) { return bcast_add_generic(x, m, cbcast_plan(x.value(), m.value())); }
Var cbcast_mul(const Var& x, const Var& m) { return bcast_mul_generic(x, m, cbcast_plan(x.value(), m.value())); }

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Var reshape(const Var& x, std::vector<int> s) {
  Tensor out = x.value().reshaped(s);
  auto n = make_node(std::move(out));
  if (x.node->has_tan()) n->tan = x.node->tan.reshaped(s);
  attach(n, {x}, [px = x.node](Node& self) {
    if (!self.grad.empty()) accum(px->grad, px->val.shape, self.grad.reshaped(px->val.shape));
    if (!self.gtan.empty() && px->has_tan())
      accum(px->gtan, px->val.shape, self.gtan.reshaped(px->val.shape));
  });
  return Var(n);
}

namespace {

struct ReducePlan {
  int64_t pre = 1, red = 1, post = 1;
  std::vector<int> out_shape;
};

ReducePlan reduce_plan(const Tensor& x, std::vector<int> axes, bool keepdims) {
  std::sort(axes.begin(), axes.end());
  for (size_t i = 1; i < axes.size(); ++i) {
    if (axes[i] != axes[i - 1] + 1) throw std::invalid_argument("reduce_sum: axes must be contiguous");
  }
  if (axes.empty()) throw std::invalid_argument("reduce_sum: no axes");
  int a = axes.front(), b = axes.back();
  if (a < 0 || b >= x.ndim()) throw std::invalid_argument("reduce_sum: axis out of range");
  ReducePlan pl;
  for (int i = 0; i < x.ndim(); ++i) {
    if (i < a) {
      pl.pre *= x.dim(i);
      pl.out_shape.push_back(x.dim(i));
    } else if (i <= b) {
      pl.red *= x.dim(i);
      if (keepdims) pl.out_shape.push_back(1);
    } else {
      pl.post *= x.dim(i);
      pl.out_shape.push_back(x.dim(i));
    }
  }
  if (pl.out_shape.empty()) pl.out_shape.push_back(1);
  return pl;
}

}  // namespace

Var reduce_sum(const Var& x, const std::vector<int>& axes, bool keepdims) {
  const Tensor& xv = x.value();
  ReducePlan pl = reduce_plan(xv, axes, keepdims);
  auto fwd = [&pl](const Tensor& in) {
    Tensor out(pl.out_shape);
    for (int64_t p = 0; p < pl.pre; ++p)
      for (int64_t r = 0; r < pl.red; ++r) {
        const double* src = in.data() + (p * pl.red + r) * pl.post;
        double* dst = out.data() + p * pl.post;
        for (int64_t q = 0; q < pl.post; ++q) dst[q] += src[q];
      }
    return out;
  };
  auto n = make_node(fwd(xv));
  if (x.node->has_tan()) n->tan = fwd(x.node->tan);
  attach(n, {x}, [px = x.node, pl](Node& self) {
    auto bwd = [&pl](Tensor& gx, const std::vector<int>& shape, const Tensor& g) {
      if (gx.empty()) gx = Tensor(shape);
      for (int64_t p = 0; p < pl.pre; ++p)
        for (int64_t r = 0; r < pl.red; ++r) {
          double* dst = gx.data() + (p * pl.red + r) * pl.post;
          const double* src = g.data() + p * pl.post;
          for (int64_t q = 0; q < pl.post; ++q) dst[q] += src[q];
        }
    };
    if (!self.grad.empty()) bwd(px->grad, px->val.shape, self.grad);
    if (!self.gtan.empty() && px->has_tan()) bwd(px->gtan, px->val.shape, self.gtan);
  });
  return Var(n);
}

Var sum_all(const Var& x) {
  std::vector<int> axes(static_cast<size_t>(x.value().ndim()));
  for (int i = 0; i < x.value().ndim(); ++i) axes[static_cast<size_t>(i)] = i;
  return reduce_sum(x, axes, false);
}

Var mean_all(const Var& x) {
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.value().numel()));
}

Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
  int B = rows[0].value().dim(0), D = rows[0].value().dim(1);
  int L = static_cast<int>(rows.size());
  Tensor out({B, L, D});
  bool any_tan = false;
  for (int l = 0; l < L; ++l) {
    check_same_shape(rows[static_cast<size_t>(l)], rows[0], "stack_rows");
    any_tan = any_tan || rows[static_cast<size_t>(l)].node->has_tan();
    const Tensor& rv = rows[static_cast<size_t>(l)].value();
    for (int b = 0; b < B; ++b)
      for (int dd = 0; dd < D; ++dd)
        out.d[static_cast<size_t>((static_cast<int64_t>(b) * L + l) * D + dd)] = rv.at2(b, dd);
  }
  auto n = make_node(std::move(out));
  if (any_tan) {
    Tensor t({B, L, D});
    for (int l = 0; l < L; ++l) {
      const Node* rn = rows[static_cast<size_t>(l)].node.get();
      if (!rn->has_tan()) continue;
      for (int b = 0; b < B; ++b)
        for (int dd = 0; dd < D; ++dd)
          t.d[static_cast<size_t>((static_cast<int64_t>(b) * L + l) * D + dd)] = rn->tan.at2(b, dd);
    }
    n->tan = std::move(t);
  }
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& r : rows) needs = needs || r.node->needs_grad;
  }
  if (needs) {
    n->needs_grad = true;
    for (const auto& r : rows) n->parents.push_back(r.node);
    std::vector<NodePtr> ps;
    for (const auto& r : rows) ps.push_back(r.node);
    n->backward_fn = [ps, B, L, D](Node& self) {
      for (int l = 0; l < L; ++l) {
        Node* p = ps[static_cast<size_t>(l)].get();
        if (!p->needs_grad) continue;
        auto pull = [&](Tensor& dst, const Tensor& g) {
          if (dst.empty()) dst = Tensor(p->val.shape);
          for (int b = 0; b < B; ++b)
            for (int dd = 0; dd < D; ++dd)
              dst.at2(b, dd) += g.d[static_cast<size_t>((static_cast<int64_t>(b) * L + l) * D + dd)];
        };
        if (!self.grad.empty()) pull(p->grad, self.grad);
        if (!self.gtan.empty() && p->has_tan()) pull(p->gtan, self.gtan);
      }
    };
  }
  return Var(n);
}

Var take_row(const Var& x, int row) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 3) throw std::invalid_argument("take_row: need [B,L,D]");
  int B = xv.dim(0), L = xv.dim(1), D = xv.dim(2);
  if (row < 0 || row >= L) throw std::invalid_argument("take_row: row out of range");
  auto fwd = [B, L, D, row](const Tensor& in) {
    Tensor out({B, D});
    for (int b = 0; b < B; ++b)
      for (int dd = 0; dd < D; ++dd)
        out.at2(b, dd) = in.d[static_cast<size_t>((static_cast<int64_t>(b) * L + row) * D + dd)];
    return out;
  };
  auto n = make_node(fwd(xv));
  if (x.node->has_tan()) n->tan = fwd(x.node->tan);
  attach(n, {x}, [px = x.node, B, L, D, row](Node& self) {
    auto bwd = [&](Tensor& dst, const Tensor& g) {
      if (dst.empty()) dst = Tensor(px->val.shape);
      for (int b = 0; b < B; ++b)
        for (int dd = 0; dd < D; ++dd)
          dst.d[static_cast<size_t>((static_cast<int64_t>(b) * L + row) * D + dd)] += g.at2(b, dd);
    };
    if (!self.grad.empty()) bwd(px->grad, self.grad);
    if (!self.gtan.empty() && px->has_tan()) bwd(px->gtan, self.gtan);
  });
  return Var(n);
}

Var gather_cols(const Var& x, const std::vector<int>& idx) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 2) throw std::invalid_argument("gather_cols: need [B,K]");
  int B = xv.dim(0), K = xv.dim(1);
  if (static_cast<int>(idx.size()) != B) throw std::invalid_argument("gather_cols: index count");
  for (int i : idx) {
    if (i < 0 || i >= K) throw std::invalid_argument("gather_cols: index out of range");
  }
  auto fwd = [B, &idx](const Tensor& in) {
    Tensor out({B});
    for (int b = 0; b < B; ++b) out.d[static_cast<size_t>(b)] = in.at2(b, idx[static_cast<size_t>(b)]);
    return out;
  };
  auto n = make_node(fwd(xv));
  if (x.node->has_tan()) n->tan = fwd(x.node->tan);
  attach(n, {x}, [px = x.node, idx, B](Node& self) {
    auto bwd = [&](Tensor& dst, const Tensor& g) {
      if (dst.empty()) dst = Tensor(px->val.shape);
      for (int b = 0; b < B; ++b) dst.at2(b, idx[static_cast<size_t>(b)]) += g.d[static_cast<size_t>(b)];
    };
    if (!self.grad.empty()) bwd(px->grad, self.grad);
    if (!self.gtan.empty() && px->has_tan()) bwd(px->gtan, self.gtan);
  });
  return Var(n);
}

Var scatter_cols(const Var& v, const std::vector<int>& idx, int k) {
  const Tensor& vv = v.value();
  if (vv.ndim() != 1) throw std::invalid_argument("scatter_cols: need [B]");
  int B = vv.dim(0);
  if (static_cast<int>(idx.size()) != B) throw std::invalid_argument("scatter_cols: index count");
  auto fwd = [B, k, &idx](const Tensor& in) {
    Tensor out({B, k});
    for (int b = 0; b < B; ++b) out.at2(b, idx[static_cast<size_t>(b)]) = in.d[static_cast<size_t>(b)];
    return out;
  };
  auto n = make_node(fwd(vv));
  if (v.node->has_tan()) n->tan = fwd(v.node->tan);
  attach(n, {v}, [pv = v.node, idx, B](Node& self) {
    auto bwd = [&](Tensor& dst, const Tensor& g) {
      if (dst.empty()) dst = Tensor(pv->val.shape);
      for (int b = 0; b < B; ++b) dst.d[static_cast<size_t>(b)] += g.at2(b, idx[static_cast<size_t>(b)]);
    };
    if (!self.grad.empty()) bwd(pv->grad, self.grad);
    if (!self.gtan.empty() && pv->has_tan()) bwd(pv->gtan, self.gtan);
  });
  return Var(n);
}

// ---------------------------------------------------------------------------
// spatial transforms
// ---------------------------------------------------------------------------

Var geom_transform(const Var& x, const std::vector<GeomSpec>& per_sample) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw std::invalid_argument("geom_transform: need 4-d input");
  int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (static_cast<int>(per_sample.size()) != B)
    throw std::invalid_argument("geom_transform: spec count mismatch");
  for (const auto& g : per_sample) {
    if (g.rot90 != 0 && H != W) throw std::invalid_argument("geom_transform: rot90 needs square input");
  }

  // src[b*H*W + y*W + x] = source pixel linear index within the sample plane, or -1.
  auto srcmap = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(B) * H * W);
  for (int b = 0; b < B; ++b) {
    const GeomSpec& gsp = per_sample[static_cast<size_t>(b)];
    for (int y = 0; y < H; ++y) {
      for (int xx = 0; xx < W; ++xx) {
        // out = translate(rot(flip(in))); chase the source backwards.
        int sy = y - gsp.dy, sx = xx - gsp.dx;
        bool ok = sy >= 0 && sy < H && sx >= 0 && sx < W;
        if (ok) {
          for (int r = 0; r < ((gsp.rot90 % 4) + 4) % 4; ++r) {
            int ty = sx, tx = W - 1 - sy;  // inverse of one CCW quarter turn applied to indices
            sy = ty;
            sx = tx;
          }
          if (gsp.hflip) sx = W - 1 - sx;
        }
        (*srcmap)[(static_cast<size_t>(b) * H + y) * W + xx] = ok ? sy * W + sx : -1;
      }
    }
  }
  auto fwd = [B, C, H, W, &srcmap](const Tensor& in) {
    Tensor out({B, C, H, W});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i) {
          int32_t s = (*srcmap)[static_cast<size_t>(b) * H * W + i];
          out.d[static_cast<size_t>(((static_cast<int64_t>(b) * C + c) * H * W) + i)] =
              s >= 0 ? in.d[static_cast<size_t>(((static_cast<int64_t>(b) * C + c) * H * W) + s)] : 0.0;
        }
    return out;
  };
  auto n = make_node(fwd(xv));
  if (x.node->has_tan()) n->tan = fwd(x.node->tan);
  attach(n, {x}, [px = x.node, srcmap, B, C, H, W](Node& self) {
    auto bwd = [&](Tensor& dst, const Tensor& g) {
      if (dst.empty()) dst = Tensor(px->val.shape);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < H * W; ++i) {
            int32_t s = (*srcmap)[static_cast<size_t>(b) * H * W + i];
            if (s >= 0)
              dst.d[static_cast<size_t>(((static_cast<int64_t>(b) * C + c) * H * W) + s)] +=
                  g.d[static_cast<size_t>(((static_cast<int64_t>(b) * C + c) * H * W) + i)];
          }
    };
    if (!self.grad.empty()) bwd(px->grad, self.grad);
    if (!self.gtan.empty() && px->has_tan()) bwd(px->gtan, self.gtan);
  });
  return Var(n);
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

void BatchNormState::init(int c) {
  running_mean = Tensor({c});
  running_var = Tensor::full({c}, 1.0);
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& st,
                 bool training, bool update_stats) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw std::invalid_argument("batch_norm2d: need 4-d input");
  if (x.node->has_tan()) throw std::logic_error("batch_norm2d: tangent channel unsupported");
  int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t N = static_cast<int64_t>(B) * H * W;
  auto xhat = std::make_shared<Tensor>(xv.shape);
  auto invstd = std::make_shared<Tensor>(std::vector<int>{C});

  if (training) {
    for (int c = 0; c < C; ++c) {
      double mu = 0.0;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < H * W; ++i) mu += xv.d[static_cast<size_t>((static_cast<int64_t>(b) * C + c) * H * W + i)];
      mu /= static_cast<double>(N);
      double var = 0.0;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < H * W; ++i) {
          double dd = xv.d[static_cast<size_t>((static_cast<int64_t>(b) * C + c) * H * W + i)] - mu;
          var += dd * dd;
        }
      var /= static_cast<double>(N);
      double is = 1.0 / std::sqrt(var + st.eps);
      invstd->d[static_cast<size_t>(c)] = is;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < H * W; ++i) {
          size_t k = static_cast<size_t>((static_cast<int64_t>(b) * C + c) * H * W + i);
          xhat->d[k] = (xv.d[k] - mu) * is;
        }
      if (update_stats) {
        double unbiased = N > 1 ? var * static_cast<double>(N) / static_cast<double>(N - 1) : var;
        st.running_mean.d[static_cast<size_t>(c)] =
            (1.0 - st.momentum) * st.running_mean.d[static_cast<size_t>(c)] + st.momentum * mu;
        st.running_var.d[static_cast<size_t>(c)] =
            (1.0 - st.momentum) * st.running_var.d[static_cast<size_t>(c)] + st.momentum * unbiased;
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      double mu = st.running_mean.d[static_cast<size_t>(c)];
      double is = 1.0 / std::sqrt(st.running_var.d[static_cast<size_t>(c)] + st.eps);
      invstd->d[static_cast<size_t>(c)] = is;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < H * W; ++i) {
          size_t k = static_cast<size_t>((static_cast<int64_t>(b) * C + c) * H * W + i);
          xhat->d[k] = (xv.d[k] - mu) * is;
        }
    }
  }

  Tensor out(xv.shape);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H * W; ++i) {
        size_t k = static_cast<size_t>((static_cast<int64_t>(b) * C + c) * H * W + i);
        out.d[k] = gv.d[static_cast<size_t>(c)] * xhat->d[k] + bv.d[static_cast<size_t>(c)];
      }
  auto n = make_node(std::move(out));
  attach(n, {x, gamma, beta},
         [px = x.node, pg = gamma.node, pb = beta.node, xhat, invstd, B, C, H, W, N,
          training](Node& self) {
           if (self.grad.empty()) return;
           const Tensor& g = self.grad;
           const Tensor& gv = pg->val;
           for (int c = 0; c < C; ++c) {
             double sum_g = 0.0, sum_gx = 0.0;
             for (int b = 0; b < B; ++b)
               for (int i = 0; i < H * W; ++i) {
                 size_t k = static_cast<size_t>((static_cast<int64_t>(b) * C + c) * H * W + i);
                 sum_g += g.d[k];
                 sum_gx += g.d[k] * xhat->d[k];
               }
             if (pb->needs_grad) accum_at(pb->grad, pb->val.shape, static_cast<size_t>(c), sum_g);
             if (pg->needs_grad) accum_at(pg->grad, pg->val.shape, static_cast<size_t>(c), sum_gx);
             if (px->needs_grad) {
               if (px->grad.empty()) px->grad = Tensor(px->val.shape);
               double gam = gv.d[static_cast<size_t>(c)];
               double is = invstd->d[static_cast<size_t>(c)];
               double mg = sum_g / static_cast<double>(N);
               double mgx = sum_gx / static_cast<double>(N);
               for (int b = 0; b < B; ++b)
                 for (int i = 0; i < H * W; ++i) {
                   size_t k = static_cast<size_t>((static_cast<int64_t>(b) * C + c) * H * W + i);
                   double dxhat = g.d[k] * gam;
                   px->grad.d[k] += training
                                        ? is * (dxhat - gam * mg - xhat->d[k] * gam * mgx)
                                        : is * dxhat;
                 }
             }
           }
         });
  return Var(n);
}

void check_finite(const Var& x, const char* what) {
  if (!all_finite(x.value())) {
    throw NumericalError(std::string("non-finite values in ") + what);
  }
}

}  // namespace frboost::ag

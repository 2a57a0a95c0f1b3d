#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "frboost/tensor.hpp"

namespace frboost::ag {

// Define-by-run reverse-mode autodiff with an optional forward tangent
// channel per node. Seeding a tangent on an input and then back-propagating
// from the *tangent* of a scalar output yields gradients of directional
// derivatives, which is how the discriminator R1 term and the generator
// path-length term get exact parameter gradients without a second tape.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor val;   // primal value
  Tensor tan;   // forward tangent; empty means identically zero
  Tensor grad;  // adjoint of val; lazily allocated
  Tensor gtan;  // adjoint of tan; lazily allocated
  bool needs_grad = false;
  uint64_t seq = 0;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  bool has_tan() const { return !tan.empty(); }
};

// When false, newly created ops record no parents and no backward functions.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node(std::move(n)) {}

  static Var leaf(Tensor v, bool requires_grad = false);
  static Var param(Tensor v) { return leaf(std::move(v), true); }
  static Var constant(Tensor v) { return leaf(std::move(v), false); }
  static Var scalar(double v) { return constant(Tensor::scalar(v)); }

  bool defined() const { return node != nullptr; }
  const Tensor& value() const { return node->val; }
  Tensor& value_mut() { return node->val; }
  const Tensor& grad() const { return node->grad; }
  Tensor& grad_mut() { return node->grad; }
  // Var is a shared handle; clearing gradients mutates the node, not the handle.
  void zero_grad() const { node->grad = Tensor(); node->gtan = Tensor(); }
  void set_tangent(Tensor t) const;
  const Tensor& tangent() const { return node->tan; }
  const std::vector<int>& shape() const { return node->val.shape; }

  NodePtr node;
};

// Runs reverse accumulation from `root`. Exactly one of the two seeds is
// typically used: seed_grad differentiates root.val, seed_gtan differentiates
// root.tan. Scalar roots may pass empty seeds to mean 1.
void backward(const Var& root, Tensor seed_grad = Tensor(), Tensor seed_gtan = Tensor());

// Detached copy of the current value (constant leaf).
Var detach(const Var& x);

// ---- arithmetic ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& x);
Var add_scalar(const Var& x, double c);
Var mul_scalar(const Var& x, double c);

// ---- elementwise nonlinearities ----
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.2);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var vexp(const Var& x);
Var vlog(const Var& x);
Var vsqrt(const Var& x);           // derivative guarded to 0 at x == 0
Var rsqrt(const Var& x, double eps = 0.0);
Var square(const Var& x);
Var vcos(const Var& x);
Var vsin(const Var& x);
Var vacos(const Var& x);           // input clamped to [-1+1e-12, 1-1e-12]
Var clamp_min(const Var& x, double lo);
Var clamp_max(const Var& x, double hi);

// ---- linear algebra ----
// y[m,n] = op(a) * op(b); transposition flags follow gemm conventions.
Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false);

// ---- convolution and friends (NCHW) ----
Var conv2d(const Var& x, const Var& w, int stride, int pad);
Var avgpool2(const Var& x);
Var upsample_nearest2(const Var& x);
Var bilinear_resize(const Var& x, int oh, int ow);  // half-pixel centers

// ---- broadcast helpers ----
// s.shape must be a prefix of x.shape; out = x * broadcast(s).
Var bcast_mul(const Var& x, const Var& s);
// s.shape must be a prefix of x.shape; out = x + broadcast(s).
Var bcast_add(const Var& x, const Var& s);
// b.shape == [C] with x [B,C,...]: per-channel affine pieces.
Var channel_add(const Var& x, const Var& b);
Var channel_mul(const Var& x, const Var& m);
// b.shape is a suffix of x.shape (dense-layer bias).
Var suffix_add(const Var& x, const Var& b);
// m has x.shape with dim(1) == 1; broadcast along channels.
Var cbcast_add(const Var& x, const Var& m);
Var cbcast_mul(const Var& x, const Var& m);

// ---- shape ops ----
Var reshape(const Var& x, std::vector<int> s);
Var reduce_sum(const Var& x, const std::vector<int>& axes, bool keepdims = false);
Var sum_all(const Var& x);
Var mean_all(const Var& x);
// Stack L tensors of shape [B,D] into [B,L,D]; take_row slices one row back out.
Var stack_rows(const std::vector<Var>& rows);
Var take_row(const Var& x, int row);
// Per-row gather/scatter on [B,K] with idx[B].
Var gather_cols(const Var& x, const std::vector<int>& idx);
Var scatter_cols(const Var& v, const std::vector<int>& idx, int k);

// ---- spatial index transform (flip / rot90 / integer shift) ----
struct GeomSpec {
  bool hflip = false;
  int rot90 = 0;  // quarter turns, counter-clockwise
  int dx = 0;     // shift right
  int dy = 0;     // shift down
  bool identity() const { return !hflip && rot90 == 0 && dx == 0 && dy == 0; }
};
Var geom_transform(const Var& x, const std::vector<GeomSpec>& per_sample);

// ---- normalization ----
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  void init(int c);
};
// x [B,C,H,W]; gamma/beta [C]. In training mode uses batch statistics and,
// when update_stats, folds them into the running buffers.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& st,
                 bool training, bool update_stats);

// ---- checks ----
void check_finite(const Var& x, const char* what);

}  // namespace frboost::ag

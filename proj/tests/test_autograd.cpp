#include <cmath>
#include <vector>

#include <doctest.h>

#include "frboost/autograd.hpp"
#include "frboost/nn.hpp"
#include "support/gradcheck.hpp"

using namespace frboost;
using namespace frboost::ag;
using frboost::testsupport::generic_values;
using frboost::testsupport::gradcheck;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  int m = ta ? a.dim(1) : a.dim(0);
  int k = ta ? a.dim(0) : a.dim(1);
  int n = tb ? b.dim(0) : b.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) {
        double av = ta ? a.at2(kk, i) : a.at2(i, kk);
        double bv = tb ? b.at2(j, kk) : b.at2(kk, j);
        acc += av * bv;
      }
      out.at2(i, j) = acc;
    }
  return out;
}

Tensor naive_conv(const Tensor& x, const Tensor& w, int stride, int pad) {
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  int OH = (H + 2 * pad - KH) / stride + 1;
  int OW = (W + 2 * pad - KW) / stride + 1;
  Tensor out({B, O, OH, OW});
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < KH; ++ky)
              for (int kx = 0; kx < KW; ++kx) {
                int iy = oy * stride - pad + ky;
                int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.at4(b, c, iy, ix) * w.at4(o, c, ky, kx);
              }
          out.at4(b, o, oy, ox) = acc;
        }
  return out;
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("matmul values match a naive reference for all flag combinations") {
  Rng rng(7);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({4, 5}, rng);
  Tensor at = Tensor::randn({4, 3}, rng);
  Tensor bt = Tensor::randn({5, 4}, rng);
  struct Case { Tensor a, b; bool ta, tb; };
  std::vector<Case> cases = {{a, b, false, false}, {at, b, true, false},
                             {a, bt, false, true}, {at, bt, true, true}};
  for (auto& c : cases) {
    Tensor got = matmul(Var::constant(c.a), Var::constant(c.b), c.ta, c.tb).value();
    Tensor want = naive_matmul(c.a, c.b, c.ta, c.tb);
    REQUIRE(got.same_shape(want));
    for (size_t i = 0; i < got.d.size(); ++i) CHECK(got.d[i] == doctest::Approx(want.d[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d values match a naive reference") {
  Rng rng(11);
  for (int stride : {1, 2}) {
    Tensor x = Tensor::randn({2, 3, 5, 5}, rng);
    Tensor w = Tensor::randn({4, 3, 3, 3}, rng);
    Tensor got = conv2d(Var::constant(x), Var::constant(w), stride, 1).value();
    Tensor want = naive_conv(x, w, stride, 1);
    REQUIRE(got.same_shape(want));
    for (size_t i = 0; i < got.d.size(); ++i) CHECK(got.d[i] == doctest::Approx(want.d[i]).epsilon(1e-10));
  }
}

TEST_CASE("elementwise ops pass gradcheck at generic points") {
  Rng rng(3);
  Var x = Var::leaf(generic_values({2, 3}, rng), true);

  auto check = [&](const std::function<Var()>& f) {
    auto r = gradcheck(f, {x});
    CAPTURE(r.worst);
    CHECK(r.max_rel_err < kTol);
  };
  check([&] { return sum_all(relu(x)); });
  check([&] { return sum_all(leaky_relu(x, 0.2)); });
  check([&] { return sum_all(sigmoid(x)); });
  check([&] { return sum_all(softplus(x)); });
  check([&] { return sum_all(vexp(x)); });
  check([&] { return sum_all(square(x)); });
  check([&] { return sum_all(vcos(x)); });
  check([&] { return sum_all(vsin(x)); });
  check([&] { return sum_all(clamp_min(x, -0.1)); });
  check([&] { return sum_all(clamp_max(x, 0.1)); });
  check([&] { return mean_all(mul(x, x)); });
  check([&] { return sum_all(add_scalar(mul_scalar(x, -1.7), 0.3)); });
  check([&] { return sum_all(rsqrt(square(x), 1e-3)); });

  // positive-domain ops
  Var xp = Var::leaf(Tensor::full({2, 3}, 0.0), true);
  for (auto& v : xp.value_mut().d) v = 0.3 + rng.uniform();
  auto checkp = [&](const std::function<Var()>& f) {
    auto r = gradcheck(f, {xp});
    CAPTURE(r.worst);
    CHECK(r.max_rel_err < kTol);
  };
  checkp([&] { return sum_all(vlog(xp)); });
  checkp([&] { return sum_all(vsqrt(xp)); });

  // acos on (-0.9, 0.9)
  Var xa = Var::leaf(Tensor({2, 3}), true);
  for (auto& v : xa.value_mut().d) v = rng.uniform(-0.85, 0.85);
  auto ra = gradcheck([&] { return sum_all(vacos(xa)); }, {xa});
  CHECK(ra.max_rel_err < kTol);
}

TEST_CASE("binary and matrix ops pass gradcheck") {
  Rng rng(5);
  Var a = Var::leaf(generic_values({3, 4}, rng), true);
  Var b = Var::leaf(generic_values({3, 4}, rng), true);
  auto r1 = gradcheck([&] { return sum_all(mul(add(a, b), sub(a, b))); }, {a, b});
  CHECK(r1.max_rel_err < kTol);

  Var m1 = Var::leaf(generic_values({3, 4}, rng), true);
  Var m2 = Var::leaf(generic_values({4, 2}, rng), true);
  auto r2 = gradcheck([&] { return sum_all(square(matmul(m1, m2))); }, {m1, m2});
  CHECK(r2.max_rel_err < kTol);

  Var m3 = Var::leaf(generic_values({4, 3}, rng), true);  // used transposed
  auto r3 = gradcheck([&] { return sum_all(square(matmul(m3, m2, true, false))); }, {m3, m2});
  CHECK(r3.max_rel_err < kTol);
  Var m4 = Var::leaf(generic_values({2, 4}, rng), true);  // rhs transposed
  auto r4 = gradcheck([&] { return sum_all(square(matmul(m1, m4, false, true))); }, {m1, m4});
  CHECK(r4.max_rel_err < kTol);
}

TEST_CASE("conv, pooling and resize ops pass gradcheck") {
  Rng rng(9);
  Var x = Var::leaf(generic_values({2, 2, 4, 4}, rng), true);
  Var w = Var::leaf(generic_values({3, 2, 3, 3}, rng), true);
  auto r1 = gradcheck([&] { return sum_all(square(conv2d(x, w, 1, 1))); }, {x, w});
  CHECK(r1.max_rel_err < kTol);
  auto r1s = gradcheck([&] { return sum_all(square(conv2d(x, w, 2, 1))); }, {x, w});
  CHECK(r1s.max_rel_err < kTol);

  auto r2 = gradcheck([&] { return sum_all(square(avgpool2(x))); }, {x});
  CHECK(r2.max_rel_err < kTol);
  auto r3 = gradcheck([&] { return sum_all(square(upsample_nearest2(x))); }, {x});
  CHECK(r3.max_rel_err < kTol);
  auto r4 = gradcheck([&] { return sum_all(square(bilinear_resize(x, 3, 5))); }, {x});
  CHECK(r4.max_rel_err < kTol);
}

TEST_CASE("broadcast ops pass gradcheck") {
  Rng rng(13);
  Var x = Var::leaf(generic_values({2, 3, 2, 2}, rng), true);
  Var s_pre = Var::leaf(generic_values({2, 3}, rng), true);
  Var c = Var::leaf(generic_values({3}, rng), true);
  Var suf = Var::leaf(generic_values({2, 2}, rng), true);
  Var m1hw = Var::leaf(generic_values({2, 1, 2, 2}, rng), true);

  auto chk = [&](const std::function<Var()>& f, std::vector<Var> leaves) {
    auto r = gradcheck(f, std::move(leaves));
    CAPTURE(r.worst);
    CHECK(r.max_rel_err < kTol);
  };
  chk([&] { return sum_all(square(bcast_mul(x, s_pre))); }, {x, s_pre});
  chk([&] { return sum_all(square(channel_add(x, c))); }, {x, c});
  chk([&] { return sum_all(square(channel_mul(x, c))); }, {x, c});
  chk([&] { return sum_all(square(suffix_add(x, suf))); }, {x, suf});
  chk([&] { return sum_all(square(cbcast_add(x, m1hw))); }, {x, m1hw});
  chk([&] { return sum_all(square(cbcast_mul(x, m1hw))); }, {x, m1hw});
}

TEST_CASE("shape and index ops pass gradcheck") {
  Rng rng(17);
  Var x = Var::leaf(generic_values({2, 3, 2, 2}, rng), true);
  auto chk = [&](const std::function<Var()>& f, std::vector<Var> leaves) {
    auto r = gradcheck(f, std::move(leaves));
    CAPTURE(r.worst);
    CHECK(r.max_rel_err < kTol);
  };
  chk([&] { return sum_all(square(reshape(x, {2, 12}))); }, {x});
  chk([&] { return sum_all(square(reduce_sum(x, {2, 3}, false))); }, {x});
  chk([&] { return sum_all(square(reduce_sum(x, {1}, true))); }, {x});
  chk([&] { return square(mean_all(x)); }, {x});

  Var r0 = Var::leaf(generic_values({2, 4}, rng), true);
  Var r1v = Var::leaf(generic_values({2, 4}, rng), true);
  chk([&] { return sum_all(square(take_row(stack_rows({r0, r1v, r0}), 1))); }, {r0, r1v});
  chk([&] { return sum_all(square(take_row(stack_rows({r0, r1v, r0}), 0))); }, {r0, r1v});

  Var logits = Var::leaf(generic_values({3, 4}, rng), true);
  std::vector<int> idx = {2, 0, 3};
  chk([&] { return sum_all(square(gather_cols(logits, idx))); }, {logits});
  Var vals = Var::leaf(generic_values({3}, rng), true);
  chk([&] { return sum_all(square(scatter_cols(vals, idx, 4))); }, {vals});
}

TEST_CASE("geom_transform values and gradients") {
  // hand-checkable 2x2 single-channel cases
  Tensor t({1, 1, 2, 2});
  t.d = {1, 2, 3, 4};
  {
    GeomSpec g;
    g.hflip = true;
    Tensor out = geom_transform(Var::constant(t), {g}).value();
    CHECK(out.d == std::vector<double>{2, 1, 4, 3});
  }
  {
    GeomSpec g;
    g.rot90 = 1;  // one CCW quarter turn
    Tensor out = geom_transform(Var::constant(t), {g}).value();
    CHECK(out.d == std::vector<double>{2, 4, 1, 3});
  }
  {
    GeomSpec g;
    g.dx = 1;  // shift right, zero-fill
    Tensor out = geom_transform(Var::constant(t), {g}).value();
    CHECK(out.d == std::vector<double>{0, 1, 0, 3});
  }
  Rng rng(23);
  Var x = Var::leaf(generic_values({2, 2, 3, 3}, rng), true);
  std::vector<GeomSpec> specs(2);
  specs[0].hflip = true;
  specs[0].rot90 = 2;
  specs[1].dx = -1;
  specs[1].dy = 1;
  auto r = gradcheck([&] { return sum_all(square(geom_transform(x, specs))); }, {x});
  CHECK(r.max_rel_err < kTol);
}

TEST_CASE("batch_norm2d normalizes and passes gradcheck") {
  Rng rng(29);
  nn::TrainCtx train_ctx;
  train_ctx.training = true;

  Var x = Var::leaf(Tensor::randn({4, 3, 2, 2}, rng), true);
  Var gamma = Var::leaf(generic_values({3}, rng), true);
  Var beta = Var::leaf(generic_values({3}, rng), true);
  BatchNormState st;
  st.init(3);

  Tensor y = batch_norm2d(x, gamma, beta, st, true, false).value();
  // with gamma=g, beta=b the per-channel mean must be b and variance g^2
  for (int c = 0; c < 3; ++c) {
    double mu = 0.0, var = 0.0;
    int n = 0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 4; ++i) {
        mu += y.at4(b, c, i / 2, i % 2);
        ++n;
      }
    mu /= n;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 4; ++i) {
        double d = y.at4(b, c, i / 2, i % 2) - mu;
        var += d * d;
      }
    var /= n;
    CHECK(mu == doctest::Approx(beta.value().d[c]).epsilon(1e-9));
    // eps inside the normalizer shifts the output variance by ~eps/var
    CHECK(var == doctest::Approx(gamma.value().d[c] * gamma.value().d[c]).epsilon(1e-4));
  }

  auto r = gradcheck(
      [&] { return sum_all(square(batch_norm2d(x, gamma, beta, st, true, false))); },
      {x, gamma, beta});
  CAPTURE(r.worst);
  CHECK(r.max_rel_err < 5e-4);  // batch statistics amplify fd noise slightly

  // eval mode uses running stats and is elementwise-affine
  st.running_mean = Tensor::full({3}, 0.25);
  st.running_var = Tensor::full({3}, 2.0);
  auto re = gradcheck(
      [&] { return sum_all(square(batch_norm2d(x, gamma, beta, st, false, false))); },
      {x, gamma, beta});
  CHECK(re.max_rel_err < kTol);
}

TEST_CASE("gradients accumulate until zeroed") {
  Var x = Var::leaf(Tensor::full({2}, 3.0), true);
  Var y = sum_all(square(x));
  backward(y);
  CHECK(x.grad().d[0] == doctest::Approx(6.0));
  Var y2 = sum_all(square(x));
  backward(y2);
  CHECK(x.grad().d[0] == doctest::Approx(12.0));
  x.zero_grad();
  CHECK(x.grad().empty());
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  Var x = Var::leaf(Tensor::full({2}, 1.5), true);
  NoGradGuard ng;
  Var y = sum_all(square(x));
  CHECK_FALSE(y.node->needs_grad);
  CHECK(y.node->parents.empty());
}

TEST_CASE("tangent channel computes exact Hessian-vector products") {
  Rng rng(31);
  Tensor xv = generic_values({5}, rng);
  Tensor dir = Tensor::randn({5}, rng);

  auto f = [](const Var& x) {
    return sum_all(mul(vsin(x), vexp(mul_scalar(square(x), 0.3))));
  };

  // analytic HVP via forward-over-reverse
  Var x = Var::leaf(xv, true);
  x.set_tangent(dir);
  Var y = f(x);
  REQUIRE(y.node->has_tan());
  backward(y, Tensor(), Tensor::scalar(1.0));
  Tensor hvp = x.grad();

  // finite difference of the gradient along dir
  const double eps = 1e-5;
  auto grad_at = [&](double sign) {
    Tensor shifted = xv;
    shifted.add_(dir, sign * eps);
    Var xs = Var::leaf(shifted, true);
    Var ys = f(xs);
    backward(ys);
    return xs.grad();
  };
  Tensor gp = grad_at(1.0), gm = grad_at(-1.0);
  for (size_t i = 0; i < hvp.d.size(); ++i) {
    double fd = (gp.d[i] - gm.d[i]) / (2 * eps);
    CHECK(frboost::testsupport::gc_rel_err(fd, hvp.d[i]) < kTol);
  }
}

// The R1 pattern: parameter gradients of mean_b ||grad_x D(x)_b||^2 computed
// with the dual channel must match finite differences of the penalty value.
TEST_CASE("dual channel differentiates an R1-style input-gradient penalty") {
  Rng rng(37);
  const int B = 2;
  Tensor xv = Tensor::randn({B, 1, 4, 4}, rng);
  Var w1 = Var::param(generic_values({2, 1, 3, 3}, rng));
  Var w2 = Var::param(generic_values({1, 2, 3, 3}, rng));

  auto D = [&](const Var& img) {  // per-sample logits [B]
    Var h = leaky_relu(conv2d(img, w1, 1, 1), 0.2);
    Var o = conv2d(h, w2, 1, 1);
    return reduce_sum(o, {1, 2, 3}, false);
  };

  auto penalty_value = [&]() {
    Var x = Var::leaf(xv, true);
    Var s = sum_all(D(x));
    backward(s);
    const Tensor& g = x.grad();
    double acc = 0.0;
    for (double v : g.d) acc += v * v;
    return acc / B;
  };

  // pass A: input gradients
  Var xa = Var::leaf(xv, true);
  Var sa = sum_all(D(xa));
  backward(sa);
  Tensor G = xa.grad();

  // pass B: seed tangent with G, differentiate the tangent output
  w1.zero_grad();
  w2.zero_grad();
  Var xb = Var::leaf(xv, false);
  xb.set_tangent(G);
  Var sb = sum_all(D(xb));
  backward(sb, Tensor(), Tensor::scalar(2.0 / B));
  Tensor gw1 = w1.grad(), gw2 = w2.grad();

  const double eps = 1e-5;
  for (auto* pw : {&w1, &w2}) {
    Tensor& vals = pw->value_mut();
    const Tensor& analytic = (pw == &w1) ? gw1 : gw2;
    for (size_t i = 0; i < vals.d.size(); ++i) {
      double orig = vals.d[i];
      vals.d[i] = orig + eps;
      double fp = penalty_value();
      vals.d[i] = orig - eps;
      double fm = penalty_value();
      vals.d[i] = orig;
      double fd = (fp - fm) / (2 * eps);
      CAPTURE(i);
      CHECK(frboost::testsupport::gc_rel_err(fd, analytic.d[i]) < kTol);
    }
  }
}

// The path-length pattern: gradients of mean_b (||J_b|| - a)^2 where J_b is
// the JVP of the generator output against a fixed random image.
TEST_CASE("dual channel differentiates a path-length-style penalty") {
  Rng rng(41);
  const int B = 2, D = 3;
  const double a = 0.5;
  Tensor wv = Tensor::randn({B, D}, rng);
  Tensor noise = Tensor::randn({B, 4}, rng);
  Var Wg = Var::param(generic_values({D, 4}, rng));

  auto Gnet = [&](const Var& w) { return vsin(matmul(w, Wg)); };  // [B,4]

  auto jacobians = [&]() {  // J[b,:] = d<y_b, noise_b>/dw_b
    Var w = Var::leaf(wv, true);
    Var s = sum_all(mul(Gnet(w), Var::constant(noise)));
    backward(s);
    return w.grad();
  };
  auto penalty_value = [&]() {
    Tensor J = jacobians();
    double acc = 0.0;
    for (int b = 0; b < B; ++b) {
      double n2 = 0.0;
      for (int j = 0; j < D; ++j) n2 += J.at2(b, j) * J.at2(b, j);
      double n = std::sqrt(n2);
      acc += (n - a) * (n - a);
    }
    return acc / B;
  };

  Tensor J = jacobians();
  Tensor seed({B, D});
  for (int b = 0; b < B; ++b) {
    double n2 = 0.0;
    for (int j = 0; j < D; ++j) n2 += J.at2(b, j) * J.at2(b, j);
    double n = std::sqrt(n2);
    for (int j = 0; j < D; ++j) seed.at2(b, j) = 2.0 * (n - a) * J.at2(b, j) / (B * n);
  }
  Wg.zero_grad();
  Var wb = Var::leaf(wv, false);
  wb.set_tangent(seed);
  Var sb = sum_all(mul(Gnet(wb), Var::constant(noise)));
  backward(sb, Tensor(), Tensor::scalar(1.0));
  Tensor analytic = Wg.grad();

  const double eps = 1e-5;
  Tensor& vals = Wg.value_mut();
  for (size_t i = 0; i < vals.d.size(); ++i) {
    double orig = vals.d[i];
    vals.d[i] = orig + eps;
    double fp = penalty_value();
    vals.d[i] = orig - eps;
    double fm = penalty_value();
    vals.d[i] = orig;
    double fd = (fp - fm) / (2 * eps);
    CAPTURE(i);
    CHECK(frboost::testsupport::gc_rel_err(fd, analytic.d[i]) < kTol);
  }
}

}  // TEST_SUITE

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "frboost/autograd.hpp"

namespace frboost::testsupport {

// Central-difference gradient check. `build` must construct a scalar-valued
// graph from the current values of `leaves` (define-by-run, so calling it
// again after a leaf perturbation re-evaluates the function). Returns the
// worst relative error across all leaf elements.
struct GradCheck {
  double max_rel_err = 0.0;
  std::string worst;  // "<leaf>/<index>" of the worst element
};

inline double gc_rel_err(double a, double b) {
  double denom = std::max({1e-2, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) / denom;
}

inline GradCheck gradcheck(const std::function<ag::Var()>& build, std::vector<ag::Var> leaves,
                           double eps = 1e-5) {
  using namespace ag;
  for (auto& l : leaves) l.zero_grad();
  Var y = build();
  backward(y);
  std::vector<Tensor> analytic;
  for (auto& l : leaves) {
    analytic.push_back(l.grad().empty() ? Tensor(l.shape()) : l.grad());
  }

  GradCheck res;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor& v = leaves[li].value_mut();
    for (size_t i = 0; i < v.d.size(); ++i) {
      double orig = v.d[i];
      double fp, fm;
      {
        NoGradGuard ng;
        v.d[i] = orig + eps;
        fp = build().value().item();
        v.d[i] = orig - eps;
        fm = build().value().item();
        v.d[i] = orig;
      }
      double fd = (fp - fm) / (2.0 * eps);
      double err = gc_rel_err(fd, analytic[li].d[i]);
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = "leaf" + std::to_string(li) + "/" + std::to_string(i);
      }
    }
  }
  return res;
}

// Fills a tensor with values bounded away from zero (kink-free for
// relu/clamp-style ops): magnitudes in [0.2, 1.2], random signs.
inline Tensor generic_values(const std::vector<int>& shape, Rng& rng) {
  Tensor t(shape);
  for (auto& x : t.d) {
    double mag = 0.2 + rng.uniform();
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

}  // namespace frboost::testsupport

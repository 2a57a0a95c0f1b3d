#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "frboost/rng.hpp"

namespace frboost {

// Dense row-major tensor of doubles. All training math runs in 64-bit; the
// only 32-bit floats in the project live in the embedding cache file format.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> d;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);

  static int64_t numel_of(const std::vector<int>& s);
  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v);
  static Tensor scalar(double v);
  static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0);
  static Tensor uniform(std::vector<int> s, Rng& rng, double lo, double hi);

  int64_t numel() const { return static_cast<int64_t>(d.size()); }
  bool empty() const { return d.empty(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  double* data() { return d.data(); }
  const double* data() const { return d.data(); }
  double item() const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;

  Tensor reshaped(std::vector<int> s) const;

  void fill(double v);
  void add_(const Tensor& o, double alpha = 1.0);  // this += alpha * o
  void scale_(double a);

  // 4-d accessor, used by the conv/pool kernels.
  double& at4(int b, int c, int y, int x) {
    return d[static_cast<size_t>(((static_cast<int64_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x)];
  }
  double at4(int b, int c, int y, int x) const {
    return d[static_cast<size_t>(((static_cast<int64_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x)];
  }
  double& at2(int r, int c) { return d[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }
  double at2(int r, int c) const { return d[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }
};

// C = alpha * op(A) * op(B) + beta * C, row-major.
void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, const double* b,
          double beta, double* c);

bool all_finite(const Tensor& t);

// FNV-1a over a shape+data byte image; used for frozen-parameter contracts.
uint64_t tensor_hash(const Tensor& t, uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace frboost

#include "frboost/tensor.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace frboost {

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), d(static_cast<size_t>(numel_of(shape)), 0.0) {}

int64_t Tensor::numel_of(const std::vector<int>& s) {
  int64_t n = 1;
  for (int v : s) {
    if (v < 0) throw std::invalid_argument("negative tensor dimension");
    n *= v;
  }
  return n;
}

Tensor Tensor::full(std::vector<int> s, double v) {
  Tensor t(std::move(s));
  t.fill(v);
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.d[0] = v;
  return t;
}

Tensor Tensor::randn(std::vector<int> s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (auto& x : t.d) x = rng.normal() * stddev;
  return t;
}

Tensor Tensor::uniform(std::vector<int> s, Rng& rng, double lo, double hi) {
  Tensor t(std::move(s));
  for (auto& x : t.d) x = rng.uniform(lo, hi);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor with numel " + std::to_string(numel()));
  return d[0];
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor Tensor::reshaped(std::vector<int> s) const {
  if (numel_of(s) != numel()) {
    throw std::invalid_argument("reshape " + shape_str() + " -> incompatible element count");
  }
  Tensor t;
  t.shape = std::move(s);
  t.d = d;
  return t;
}

void Tensor::fill(double v) { std::fill(d.begin(), d.end(), v); }

void Tensor::add_(const Tensor& o, double alpha) {
  if (o.d.size() != d.size()) throw std::invalid_argument("add_: size mismatch");
  cblas_daxpy(static_cast<int>(d.size()), alpha, o.d.data(), 1, d.data(), 1);
}

void Tensor::scale_(double a) { cblas_dscal(static_cast<int>(d.size()), a, d.data(), 1); }

void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, const double* b,
          double beta, double* c) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, ta ? m : k, b, tb ? k : n, beta, c, n);
}

bool all_finite(const Tensor& t) {
  for (double v : t.d) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

uint64_t tensor_hash(const Tensor& t, uint64_t seed) {
  uint64_t h = seed;
  auto mix = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  int nd = t.ndim();
  mix(&nd, sizeof(nd));
  if (!t.shape.empty()) mix(t.shape.data(), t.shape.size() * sizeof(int));
  if (!t.d.empty()) mix(t.d.data(), t.d.size() * sizeof(double));
  return h;
}

}  // namespace frboost

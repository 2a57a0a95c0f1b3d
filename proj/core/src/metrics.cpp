#include "frboost/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <iostream>

#include "frboost/errors.hpp"

namespace frboost::metrics {

namespace ag = frboost::ag;

FeaturePyramid::FeaturePyramid(std::uint64_t seed, int64_t in_channels) {
  Rng rng(seed);
  channels_ = {16, 32, 64};
  int64_t cin = in_channels;
  for (int64_t cout : channels_) {
    double gain = std::sqrt(2.0 / static_cast<double>(9 * cin));
    Tensor w = Tensor::randn({static_cast<int>(cout), static_cast<int>(cin), 3, 3}, rng);
    w.scale_(gain);
    kernels_.push_back(ag::Var::constant(std::move(w)));
    cin = cout;
  }
}

std::vector<ag::Var> FeaturePyramid::feature_maps(const ag::Var& x) const {
  std::vector<ag::Var> maps;
  ag::Var h = x;
  for (const auto& k : kernels_) {
    h = ag::leaky_relu(ag::conv2d(h, k, /*stride=*/2, /*pad=*/1), 0.2);
    maps.push_back(h);
  }
  return maps;
}

Tensor FeaturePyramid::embed(const Tensor& images, int64_t chunk) const {
  if (images.ndim() != 4) throw std::invalid_argument("embed: want [N,C,H,W]");
  const int64_t n = images.dim(0);
  const int64_t d = feature_dim();
  Tensor out({static_cast<int>(n), static_cast<int>(d)});
  ag::NoGradGuard ng;
  for (int64_t at = 0; at < n; at += chunk) {
    const int64_t b = std::min(chunk, n - at);
    Tensor slab({static_cast<int>(b), static_cast<int>(images.dim(1)),
                 static_cast<int>(images.dim(2)), static_cast<int>(images.dim(3))});
    const int64_t per = images.numel() / n;
    std::copy_n(images.d.begin() + at * per, b * per, slab.d.begin());
    ag::Var h = ag::Var::constant(std::move(slab));
    auto maps = feature_maps(h);
    const Tensor& deep = maps.back().value();  // [b, d, h, w]
    const int64_t hw = deep.dim(2) * deep.dim(3);
    for (int64_t i = 0; i < b; ++i)
      for (int64_t c = 0; c < d; ++c) {
        double acc = 0.0;
        const double* p = deep.d.data() + ((i * d + c) * hw);
        for (int64_t q = 0; q < hw; ++q) acc += p[q];
        out.d[static_cast<size_t>((at + i) * d + c)] = acc / static_cast<double>(hw);
      }
  }
  return out;
}

namespace {

Eigen::MatrixXd rows_to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (int64_t i = 0; i < t.dim(0); ++i)
    for (int64_t j = 0; j < t.dim(1); ++j) m(i, j) = t.d[static_cast<size_t>(i * t.dim(1) + j)];
  return m;
}

// V diag(sqrt(max(l,0))) V^T of a symmetric matrix.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  Eigen::VectorXd l = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * l.asDiagonal() * es.eigenvectors().transpose();
}

struct GaussFit {
  Eigen::VectorXd mu;
  Eigen::MatrixXd cov;
};

GaussFit fit_gaussian(const Tensor& feats) {
  if (feats.ndim() != 2 || feats.dim(0) < 2)
    throw ConfigError("frechet_distance: need at least 2 rows of features, got " +
                              feats.shape_str());
  Eigen::MatrixXd x = rows_to_eigen(feats);
  GaussFit f;
  f.mu = x.colwise().mean();
  Eigen::MatrixXd c = x.rowwise() - f.mu.transpose();
  f.cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  return f;
}

double min_eigenvalue(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  return es.eigenvalues().minCoeff();
}

}  // namespace

double frechet_distance(const Tensor& feats_a, const Tensor& feats_b, FidDiag* diag) {
  GaussFit a = fit_gaussian(feats_a);
  GaussFit b = fit_gaussian(feats_b);
  if (a.mu.size() != b.mu.size())
    throw ConfigError("frechet_distance: feature dims differ");

  constexpr double kJitter = 1e-6;
  const double floor = kJitter * 1e-3;
  if (min_eigenvalue(a.cov) < floor || min_eigenvalue(b.cov) < floor) {
    a.cov.diagonal().array() += kJitter;
    b.cov.diagonal().array() += kJitter;
    if (diag) diag->jitter_applied = true;
    std::clog << "[frboost] frechet_distance: near-singular covariance, applied 1e-6 jitter\n";
  }

  const Eigen::MatrixXd a_half = psd_sqrt(a.cov);
  Eigen::MatrixXd m = a_half * b.cov * a_half;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double mean_term = (a.mu - b.mu).squaredNorm();
  return mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
}

double fid(const FeaturePyramid& net, const Tensor& images_a, const Tensor& images_b,
           FidDiag* diag) {
  if (images_a.ndim() != 4 || images_b.ndim() != 4 || images_a.dim(0) < 2 || images_b.dim(0) < 2)
    throw ConfigError("fid: both image sets must hold at least 2 images");
  return frechet_distance(net.embed(images_a), net.embed(images_b), diag);
}

}  // namespace frboost::metrics

#pragma once

#include <cstdint>
#include <vector>

#include "frboost/autograd.hpp"
#include "frboost/rng.hpp"
#include "frboost/tensor.hpp"

namespace frboost::metrics {

// Fixed, seeded convolutional pyramid used as the default embedding network
// for FID and perceptual distance. Weights are frozen at construction; the
// forward pass is differentiable w.r.t. its input, never its weights.
class FeaturePyramid {
 public:
  explicit FeaturePyramid(std::uint64_t seed, int64_t in_channels = 3);

  // Activations after every stage, shallow to deep. Differentiable in x.
  std::vector<ag::Var> feature_maps(const ag::Var& x) const;

  // [N,C,H,W] -> pooled embeddings [N, feature_dim()]. No graph is built.
  Tensor embed(const Tensor& images, int64_t chunk = 64) const;

  int64_t feature_dim() const { return channels_.back(); }

 private:
  std::vector<ag::Var> kernels_;  // constants, stride-2 3x3 convs
  std::vector<int64_t> channels_;
};

struct FidDiag {
  bool jitter_applied = false;  // covariance was near-singular; 1e-6 added
};

// Fréchet distance between Gaussian fits of the rows of two [N,d] matrices.
// Matrix square root by eigendecomposition with negative eigenvalues clipped
// at zero; near-singular covariances get a 1e-6 diagonal jitter (logged).
double frechet_distance(const Tensor& feats_a, const Tensor& feats_b, FidDiag* diag = nullptr);

// FID between two image sets [N,C,H,W] under the given embedding network.
double fid(const FeaturePyramid& net, const Tensor& images_a, const Tensor& images_b,
           FidDiag* diag = nullptr);

}  // namespace frboost::metrics

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "frboost/tensor.hpp"

namespace frboost {

// Interleaved 8-bit RGB image, row-major.
struct Image8 {
  int h = 0, w = 0;
  std::vector<uint8_t> rgb;

  Image8() = default;
  Image8(int h_, int w_) : h(h_), w(w_), rgb(static_cast<size_t>(h_) * w_ * 3, 0) {}
  uint8_t& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  uint8_t at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  bool empty() const { return rgb.empty(); }
};

// [3,H,W] tensor in [-1,1] <-> 8-bit image.
Tensor image_to_tensor(const Image8& img);
Image8 tensor_to_image(const Tensor& t);  // accepts [3,H,W] or [1,3,H,W]

// Batch versions: [B,3,H,W].
Tensor images_to_batch(const std::vector<Image8>& imgs);
std::vector<Image8> batch_to_images(const Tensor& t);

Image8 load_image(const std::string& path);            // throws IngestError
void save_image(const std::string& path, const Image8& img);
Image8 resize_image(const Image8& img, int h, int w);  // bilinear

// Similarity/affine warp: `m` is the 2x3 row-major matrix mapping source
// pixel coordinates to destination coordinates; bilinear sampling.
Image8 warp_affine(const Image8& img, const std::array<double, 6>& m, int out_h, int out_w);

// Least-squares similarity transform (rotation+scale+translation) mapping
// `src` points onto `dst` points, returned as a 2x3 row-major matrix.
std::array<double, 6> similarity_transform(const std::vector<std::array<double, 2>>& src,
                                           const std::vector<std::array<double, 2>>& dst);

}  // namespace frboost

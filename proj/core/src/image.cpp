#include "frboost/image.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "frboost/errors.hpp"

namespace frboost {

namespace {

cv::Mat to_mat(const Image8& img) {
  cv::Mat m(img.h, img.w, CV_8UC3);
  std::copy(img.rgb.begin(), img.rgb.end(), m.data);
  return m;
}

Image8 from_mat(const cv::Mat& m) {
  Image8 img(m.rows, m.cols);
  if (m.isContinuous()) {
    std::copy(m.data, m.data + img.rgb.size(), img.rgb.begin());
  } else {
    for (int y = 0; y < m.rows; ++y) {
      const uint8_t* row = m.ptr<uint8_t>(y);
      std::copy(row, row + static_cast<size_t>(m.cols) * 3,
                img.rgb.begin() + static_cast<size_t>(y) * m.cols * 3);
    }
  }
  return img;
}

}  // namespace

Tensor image_to_tensor(const Image8& img) {
  Tensor t({3, img.h, img.w});
  const int64_t hw = static_cast<int64_t>(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c)
        t.d[static_cast<size_t>(c * hw + y * img.w + x)] = img.at(y, x, c) / 127.5 - 1.0;
  return t;
}

Image8 tensor_to_image(const Tensor& t) {
  const Tensor* src = &t;
  Tensor squeezed;
  if (t.ndim() == 4) {
    if (t.dim(0) != 1) throw std::invalid_argument("tensor_to_image: batch dim must be 1");
    squeezed = t.reshaped({t.dim(1), t.dim(2), t.dim(3)});
    src = &squeezed;
  }
  if (src->ndim() != 3 || src->dim(0) != 3)
    throw std::invalid_argument("tensor_to_image: want [3,H,W], got " + src->shape_str());
  int h = src->dim(1), w = src->dim(2);
  const int64_t hw = static_cast<int64_t>(h) * w;
  Image8 img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = (src->d[static_cast<size_t>(c * hw + y * w + x)] + 1.0) * 127.5;
        img.at(y, x, c) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
  return img;
}

Tensor images_to_batch(const std::vector<Image8>& imgs) {
  if (imgs.empty()) return Tensor({0, 3, 0, 0});
  int h = imgs[0].h, w = imgs[0].w;
  Tensor t({static_cast<int>(imgs.size()), 3, h, w});
  const int64_t chw = 3LL * h * w;
  for (size_t b = 0; b < imgs.size(); ++b) {
    if (imgs[b].h != h || imgs[b].w != w)
      throw std::invalid_argument("images_to_batch: inconsistent sizes");
    Tensor one = image_to_tensor(imgs[b]);
    std::copy(one.d.begin(), one.d.end(), t.d.begin() + static_cast<int64_t>(b) * chw);
  }
  return t;
}

std::vector<Image8> batch_to_images(const Tensor& t) {
  if (t.ndim() != 4 || t.dim(1) != 3)
    throw std::invalid_argument("batch_to_images: want [B,3,H,W], got " + t.shape_str());
  std::vector<Image8> out;
  const int64_t chw = 3LL * t.dim(2) * t.dim(3);
  for (int b = 0; b < t.dim(0); ++b) {
    Tensor one({3, t.dim(2), t.dim(3)});
    std::copy(t.d.begin() + b * chw, t.d.begin() + (b + 1) * chw, one.d.begin());
    out.push_back(tensor_to_image(one));
  }
  return out;
}

Image8 load_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw IngestError("cannot read image: " + path);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return from_mat(rgb);
}

void save_image(const std::string& path, const Image8& img) {
  cv::Mat rgb = to_mat(img);
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path, bgr)) throw IngestError("cannot write image: " + path);
}

Image8 resize_image(const Image8& img, int h, int w) {
  cv::Mat m = to_mat(img), out;
  cv::resize(m, out, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
  return from_mat(out);
}

Image8 warp_affine(const Image8& img, const std::array<double, 6>& m, int out_h, int out_w) {
  cv::Mat mat(2, 3, CV_64F);
  for (int i = 0; i < 6; ++i) mat.at<double>(i / 3, i % 3) = m[static_cast<size_t>(i)];
  cv::Mat src = to_mat(img), dst;
  cv::warpAffine(src, dst, mat, cv::Size(out_w, out_h), cv::INTER_LINEAR, cv::BORDER_CONSTANT);
  return from_mat(dst);
}

std::array<double, 6> similarity_transform(const std::vector<std::array<double, 2>>& src,
                                           const std::vector<std::array<double, 2>>& dst) {
  if (src.size() != dst.size() || src.size() < 2)
    throw std::invalid_argument("similarity_transform: need >= 2 matched points");
  Eigen::MatrixXd a(2, static_cast<Eigen::Index>(src.size()));
  Eigen::MatrixXd b(2, static_cast<Eigen::Index>(dst.size()));
  for (size_t i = 0; i < src.size(); ++i) {
    a(0, static_cast<Eigen::Index>(i)) = src[i][0];
    a(1, static_cast<Eigen::Index>(i)) = src[i][1];
    b(0, static_cast<Eigen::Index>(i)) = dst[i][0];
    b(1, static_cast<Eigen::Index>(i)) = dst[i][1];
  }
  Eigen::Matrix3d t = Eigen::umeyama(a, b, true);
  return {t(0, 0), t(0, 1), t(0, 2), t(1, 0), t(1, 1), t(1, 2)};
}

}  // namespace frboost

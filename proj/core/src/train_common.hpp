#pragma once

// Internal helpers shared by the stage trainers. Not installed.

#include <cstdint>
#include <utility>
#include <vector>

#include "frboost/rng.hpp"

namespace frboost::detail {

// Epoch-shuffled cyclic batch source over a set of dataset indices.
class BatchSource {
 public:
  BatchSource(std::vector<int64_t> pool, Rng& rng) : pool_(std::move(pool)), rng_(rng) {
    rng_.shuffle(pool_);
  }
  int64_t next() {
    if (cursor_ >= pool_.size()) {
      rng_.shuffle(pool_);
      cursor_ = 0;
    }
    return pool_[cursor_++];
  }

 private:
  std::vector<int64_t> pool_;
  Rng& rng_;
  size_t cursor_ = 0;
};

// Windowed loss tracker: mean of the first window vs. mean of the most
// recent window, for before/after trend reporting.
class LossWindow {
 public:
  explicit LossWindow(size_t window) : window_(window == 0 ? 1 : window) {}
  void push(double v) {
    if (first_.size() < window_) first_.push_back(v);
    recent_.push_back(v);
    if (recent_.size() > window_) recent_.erase(recent_.begin());
    last_ = v;
  }
  bool empty() const { return first_.empty(); }
  double initial() const { return mean(first_); }
  double current() const { return mean(recent_); }
  double last() const { return last_; }

 private:
  static double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
  size_t window_;
  std::vector<double> first_, recent_;
  double last_ = 0.0;
};

}  // namespace frboost::detail

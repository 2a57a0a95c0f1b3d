#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "frboost/image.hpp"
#include "frboost/rng.hpp"

namespace frboost::prior {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct IngestConfig {
  double frame_period_s = 5.0;       // one frame per P seconds
  double max_minutes_per_video = 20.0;
  int min_face_px = 100;             // face must be at least this on each side
  double detector_confidence = 0.9;
  int target_size = 112;             // square output edge

  void validate() const;  // throws ConfigError
};

// ---------------------------------------------------------------------------
// detection & alignment
// ---------------------------------------------------------------------------

struct FaceDetection {
  double box_x = 0, box_y = 0, box_w = 0, box_h = 0;
  std::array<std::array<double, 2>, 5> landmarks{};  // eyes, nose, mouth corners
  double confidence = 0;
};

class FaceDetector {
 public:
  virtual ~FaceDetector() = default;
  virtual std::vector<FaceDetection> detect(const Image8& frame) = 0;
};

// Deterministic detector for pre-cropped/centred face media: reports one
// full-frame detection whose landmarks sit at the canonical template
// position scaled to the frame.
class CenteredFaceDetector : public FaceDetector {
 public:
  explicit CenteredFaceDetector(double confidence = 1.0) : confidence_(confidence) {}
  std::vector<FaceDetection> detect(const Image8& frame) override;

 private:
  double confidence_;
};

// Canonical 5-point landmark template for a 112x112 crop (eyes, nose, mouth
// corners), scaled by target_size/112 at use sites.
const std::array<std::array<double, 2>, 5>& canonical_landmarks_112();

// Warps every gated detection onto the canonical template at
// config.target_size. Faces failing the confidence or min-size gate are
// dropped; no faces is an empty list, not an error.
std::vector<Image8> detect_and_align(const Image8& frame, FaceDetector& detector,
                                     const IngestConfig& config);

// Alignment for one known detection (shared by detect_and_align and tests).
Image8 align_face(const Image8& frame, const FaceDetection& det, int target_size);

// ---------------------------------------------------------------------------
// video sources
// ---------------------------------------------------------------------------

class VideoSource {
 public:
  virtual ~VideoSource() = default;
  virtual double duration_s() = 0;
  // Fetches the frame at timestamp t; false when out of range.
  virtual bool frame_at(double t_s, Image8& out) = 0;
  virtual std::string name() const = 0;
};

// Delegates decoding to the system video backend.
class FileVideoSource : public VideoSource {
 public:
  explicit FileVideoSource(std::string path);  // throws IngestError
  ~FileVideoSource() override;
  double duration_s() override;
  bool frame_at(double t_s, Image8& out) override;
  std::string name() const override { return path_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string path_;
};

// Procedural source for tests: frame(t) is a pure function.
class SyntheticVideoSource : public VideoSource {
 public:
  SyntheticVideoSource(double duration_s, std::function<Image8(double)> frame_fn,
                       std::string name = "synthetic")
      : dur_(duration_s), fn_(std::move(frame_fn)), name_(std::move(name)) {}
  double duration_s() override { return dur_; }
  bool frame_at(double t_s, Image8& out) override {
    if (t_s < 0 || t_s >= dur_) return false;
    out = fn_(t_s);
    return true;
  }
  std::string name() const override { return name_; }

 private:
  double dur_;
  std::function<Image8(double)> fn_;
  std::string name_;
};

struct TimedFrame {
  double t_s = 0;
  Image8 img;
};

// Frames at t = 0, P, 2P, ... strictly below min(duration, minute cap).
std::vector<TimedFrame> extract_frames(VideoSource& src, const IngestConfig& config);

// ---------------------------------------------------------------------------
// the prior dataset
// ---------------------------------------------------------------------------

struct ManifestRow {
  int64_t image_id = 0;
  std::string source;
  double timestamp_s = 0;
  double box_x = 0, box_y = 0, box_w = 0, box_h = 0;
  double confidence = 0;
};

// Sharded unlabeled face dataset: images live under
// <root>/shard_NNNN/<image_id zero-padded to 8>.png with one manifest row per
// image. Subsets share the root and carry a restricted manifest.
class PriorDataset {
 public:
  static constexpr int kShardSize = 10000;

  PriorDataset() = default;
  PriorDataset(std::string root, std::vector<ManifestRow> rows)
      : root_(std::move(root)), rows_(std::move(rows)) {}

  static PriorDataset open(const std::string& root);  // reads manifest.csv
  void save_manifest() const;                         // writes <root>/manifest.csv

  size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  const std::string& root() const { return root_; }
  const std::vector<ManifestRow>& rows() const { return rows_; }
  std::string image_path(int64_t image_id) const;
  Image8 load(size_t idx) const;

  static std::string manifest_csv_header();
  std::string manifest_csv() const;  // full file content, deterministic

 private:
  std::string root_;
  std::vector<ManifestRow> rows_;
};

struct BuildReport {
  PriorDataset dataset;
  std::vector<std::string> failures;  // one line per failed source
};

// Reads a media manifest (UTF-8, one local path per line, '#' comments),
// ingests videos via frame extraction and image folders/files directly, and
// writes the sharded dataset plus manifest.csv under out_root. Per-source
// failures are reported, not fatal; partial results are flushed.
BuildReport build_prior_dataset(const std::string& media_manifest_path, FaceDetector& detector,
                                const IngestConfig& config, const std::string& out_root);

// As above but with an explicit source list (the parsed media manifest).
BuildReport build_prior_dataset_from_sources(const std::vector<std::string>& sources,
                                             FaceDetector& detector, const IngestConfig& config,
                                             const std::string& out_root);

// Seeded permutation-prefix subsample of round(fraction * size) images.
// Nested: for the same seed, a smaller fraction selects a subset of a larger
// one. fraction outside (0,1] -> ConfigError.
PriorDataset subsample(const PriorDataset& ds, double fraction, uint64_t seed);

// Group filtering (the appendix "-F" datasets).
class GroupClassifier {
 public:
  virtual ~GroupClassifier() = default;
  virtual int classify(const Image8& img) = 0;  // label in 1..num_groups
  virtual int num_groups() const = 0;
};

PriorDataset filter_by_group(const PriorDataset& ds, GroupClassifier& classifier, int group_id);

}  // namespace frboost::prior

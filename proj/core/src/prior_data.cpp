#include "frboost/prior_data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>

#include "frboost/checkpoint.hpp"
#include "frboost/errors.hpp"

namespace frboost::prior {

namespace fs = std::filesystem;

void IngestConfig::validate() const {
  if (frame_period_s <= 0) throw ConfigError("IngestConfig: frame_period_s must be > 0");
  if (max_minutes_per_video <= 0) throw ConfigError("IngestConfig: max_minutes_per_video must be > 0");
  if (min_face_px < 1) throw ConfigError("IngestConfig: min_face_px must be >= 1");
  if (detector_confidence < 0 || detector_confidence > 1)
    throw ConfigError("IngestConfig: detector_confidence must be in [0,1]");
  if (target_size < 8) throw ConfigError("IngestConfig: target_size must be >= 8");
}

const std::array<std::array<double, 2>, 5>& canonical_landmarks_112() {
  static const std::array<std::array<double, 2>, 5> pts = {{{38.2946, 51.6963},
                                                            {73.5318, 51.5014},
                                                            {56.0252, 71.7366},
                                                            {41.5493, 92.3655},
                                                            {70.7299, 92.2041}}};
  return pts;
}

std::vector<FaceDetection> CenteredFaceDetector::detect(const Image8& frame) {
  FaceDetection d;
  d.box_x = 0;
  d.box_y = 0;
  d.box_w = frame.w;
  d.box_h = frame.h;
  const auto& tmpl = canonical_landmarks_112();
  for (size_t i = 0; i < 5; ++i) {
    d.landmarks[i][0] = tmpl[i][0] * frame.w / 112.0;
    d.landmarks[i][1] = tmpl[i][1] * frame.h / 112.0;
  }
  d.confidence = confidence_;
  return {d};
}

Image8 align_face(const Image8& frame, const FaceDetection& det, int target_size) {
  std::vector<std::array<double, 2>> src(det.landmarks.begin(), det.landmarks.end());
  std::vector<std::array<double, 2>> dst;
  dst.reserve(5);
  const double s = target_size / 112.0;
  for (const auto& p : canonical_landmarks_112()) dst.push_back({p[0] * s, p[1] * s});
  auto m = similarity_transform(src, dst);
  return warp_affine(frame, m, target_size, target_size);
}

std::vector<Image8> detect_and_align(const Image8& frame, FaceDetector& detector,
                                     const IngestConfig& config) {
  config.validate();
  std::vector<Image8> out;
  for (const auto& det : detector.detect(frame)) {
    if (det.confidence < config.detector_confidence) continue;
    if (std::min(det.box_w, det.box_h) < config.min_face_px) continue;
    out.push_back(align_face(frame, det, config.target_size));
  }
  return out;
}

// ---------------------------------------------------------------------------
// video
// ---------------------------------------------------------------------------

struct FileVideoSource::Impl {
  cv::VideoCapture cap;
};

FileVideoSource::FileVideoSource(std::string path) : impl_(new Impl), path_(std::move(path)) {
  if (!impl_->cap.open(path_)) throw IngestError("cannot open video: " + path_);
}

FileVideoSource::~FileVideoSource() = default;

double FileVideoSource::duration_s() {
  double fps = impl_->cap.get(cv::CAP_PROP_FPS);
  double frames = impl_->cap.get(cv::CAP_PROP_FRAME_COUNT);
  if (fps <= 0 || frames <= 0) return 0.0;
  return frames / fps;
}

bool FileVideoSource::frame_at(double t_s, Image8& out) {
  impl_->cap.set(cv::CAP_PROP_POS_MSEC, t_s * 1000.0);
  cv::Mat bgr;
  if (!impl_->cap.read(bgr) || bgr.empty()) return false;
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image8 img(rgb.rows, rgb.cols);
  for (int y = 0; y < rgb.rows; ++y) {
    const uint8_t* row = rgb.ptr<uint8_t>(y);
    std::copy(row, row + static_cast<size_t>(rgb.cols) * 3,
              img.rgb.begin() + static_cast<size_t>(y) * rgb.cols * 3);
  }
  out = std::move(img);
  return true;
}

std::vector<TimedFrame> extract_frames(VideoSource& src, const IngestConfig& config) {
  config.validate();
  const double cap_s = config.max_minutes_per_video * 60.0;
  const double end = std::min(src.duration_s(), cap_s);
  std::vector<TimedFrame> out;
  for (int64_t k = 0;; ++k) {
    double t = static_cast<double>(k) * config.frame_period_s;
    if (t >= end) break;
    Image8 f;
    if (!src.frame_at(t, f)) break;  // stream shorter than reported; stop cleanly
    out.push_back({t, std::move(f)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += "\"\"";
    else q += c;
  }
  q += "\"";
  return q;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string format_row(const ManifestRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), ",%.3f,%.2f,%.2f,%.2f,%.2f,%.4f", r.timestamp_s, r.box_x,
                r.box_y, r.box_w, r.box_h, r.confidence);
  return std::to_string(r.image_id) + "," + csv_field(r.source) + buf;
}

bool has_image_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ".png" || e == ".jpg" || e == ".jpeg" || e == ".bmp";
}

bool has_video_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ".mp4" || e == ".avi" || e == ".mkv" || e == ".mov" || e == ".webm";
}

}  // namespace

std::string PriorDataset::manifest_csv_header() {
  return "image_id,source,timestamp_s,box_x,box_y,box_w,box_h,confidence";
}

std::string PriorDataset::manifest_csv() const {
  std::string out = manifest_csv_header() + "\n";
  for (const auto& r : rows_) out += format_row(r) + "\n";
  return out;
}

std::string PriorDataset::image_path(int64_t image_id) const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "shard_%04lld/%08lld.png",
                static_cast<long long>(image_id / kShardSize), static_cast<long long>(image_id));
  return (fs::path(root_) / buf).string();
}

Image8 PriorDataset::load(size_t idx) const {
  return load_image(image_path(rows_.at(idx).image_id));
}

void PriorDataset::save_manifest() const {
  ckpt::atomic_write_file((fs::path(root_) / "manifest.csv").string(), manifest_csv());
}

PriorDataset PriorDataset::open(const std::string& root) {
  std::ifstream in(fs::path(root) / "manifest.csv");
  if (!in) throw IngestError("no manifest.csv under " + root);
  std::string line;
  if (!std::getline(in, line) || line != manifest_csv_header())
    throw IngestError("bad manifest header under " + root);
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 8) throw IngestError("bad manifest row under " + root + ": " + line);
    ManifestRow r;
    r.image_id = std::stoll(f[0]);
    r.source = f[1];
    r.timestamp_s = std::stod(f[2]);
    r.box_x = std::stod(f[3]);
    r.box_y = std::stod(f[4]);
    r.box_w = std::stod(f[5]);
    r.box_h = std::stod(f[6]);
    r.confidence = std::stod(f[7]);
    rows.push_back(std::move(r));
  }
  return PriorDataset(root, std::move(rows));
}

namespace {

// Writes one aligned face into the shard layout and appends its row.
void emit_face(const Image8& face, const std::string& source, double t_s,
               const FaceDetection& det, const std::string& out_root,
               std::vector<ManifestRow>& rows) {
  int64_t id = static_cast<int64_t>(rows.size());
  char buf[64];
  std::snprintf(buf, sizeof(buf), "shard_%04lld", static_cast<long long>(id / PriorDataset::kShardSize));
  fs::path shard = fs::path(out_root) / buf;
  fs::create_directories(shard);
  std::snprintf(buf, sizeof(buf), "%08lld.png", static_cast<long long>(id));
  save_image((shard / buf).string(), face);
  ManifestRow r;
  r.image_id = id;
  r.source = source;
  r.timestamp_s = t_s;
  r.box_x = det.box_x;
  r.box_y = det.box_y;
  r.box_w = det.box_w;
  r.box_h = det.box_h;
  r.confidence = det.confidence;
  rows.push_back(std::move(r));
}

void ingest_frame(const Image8& frame, const std::string& source, double t_s,
                  FaceDetector& detector, const IngestConfig& config, const std::string& out_root,
                  std::vector<ManifestRow>& rows) {
  for (const auto& det : detector.detect(frame)) {
    if (det.confidence < config.detector_confidence) continue;
    if (std::min(det.box_w, det.box_h) < config.min_face_px) continue;
    emit_face(align_face(frame, det, config.target_size), source, t_s, det, out_root, rows);
  }
}

}  // namespace

BuildReport build_prior_dataset_from_sources(const std::vector<std::string>& sources,
                                             FaceDetector& detector, const IngestConfig& config,
                                             const std::string& out_root) {
  config.validate();
  fs::create_directories(out_root);
  std::vector<ManifestRow> rows;
  std::vector<std::string> failures;

  for (const auto& src : sources) {
    try {
      fs::path p(src);
      if (fs::is_directory(p)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(p)) {
          if (e.is_regular_file() && has_image_ext(e.path())) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
          ingest_frame(load_image(f.string()), f.string(), 0.0, detector, config, out_root, rows);
      } else if (fs::is_regular_file(p) && has_image_ext(p)) {
        ingest_frame(load_image(src), src, 0.0, detector, config, out_root, rows);
      } else if (fs::is_regular_file(p) && has_video_ext(p)) {
        FileVideoSource video(src);
        for (auto& fr : extract_frames(video, config))
          ingest_frame(fr.img, src, fr.t_s, detector, config, out_root, rows);
      } else {
        throw IngestError("unreadable or unsupported source: " + src);
      }
    } catch (const IngestError& e) {
      failures.emplace_back(e.what());
    }
  }

  PriorDataset ds(out_root, std::move(rows));
  ds.save_manifest();
  return {std::move(ds), std::move(failures)};
}

BuildReport build_prior_dataset(const std::string& media_manifest_path, FaceDetector& detector,
                                const IngestConfig& config, const std::string& out_root) {
  std::ifstream in(media_manifest_path);
  if (!in) throw IngestError("cannot read media manifest: " + media_manifest_path);
  std::vector<std::string> sources;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    sources.push_back(line);
  }
  return build_prior_dataset_from_sources(sources, detector, config, out_root);
}

PriorDataset subsample(const PriorDataset& ds, double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw ConfigError("subsample: fraction must be in (0,1]");
  size_t n = static_cast<size_t>(std::llround(fraction * static_cast<double>(ds.size())));
  n = std::min(n, ds.size());
  Rng rng(derive_seed(seed, "prior.subsample"));
  std::vector<int64_t> perm = rng.permutation(static_cast<int64_t>(ds.size()));
  perm.resize(n);
  std::sort(perm.begin(), perm.end());
  std::vector<ManifestRow> rows;
  rows.reserve(n);
  for (int64_t i : perm) rows.push_back(ds.rows()[static_cast<size_t>(i)]);
  return PriorDataset(ds.root(), std::move(rows));
}

PriorDataset filter_by_group(const PriorDataset& ds, GroupClassifier& classifier, int group_id) {
  if (group_id < 1 || group_id > classifier.num_groups())
    throw ConfigError("filter_by_group: unknown group " + std::to_string(group_id));
  std::vector<ManifestRow> rows;
  for (size_t i = 0; i < ds.size(); ++i) {
    if (classifier.classify(ds.load(i)) == group_id) rows.push_back(ds.rows()[i]);
  }
  return PriorDataset(ds.root(), std::move(rows));
}

}  // namespace frboost::prior
